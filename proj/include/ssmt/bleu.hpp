#pragma once

#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssmt {

struct BleuReport {
    double score = 0.0;  // 0..100
    std::array<double, 4> precisions{};
    double brevity_penalty = 1.0;
    long hyp_length = 0;
    long ref_length = 0;
};

namespace detail {

template <typename Token>
std::map<std::vector<Token>, long> ngram_counts(const std::vector<Token>& tokens, int n) {
    std::map<std::vector<Token>, long> counts;
    if (static_cast<int>(tokens.size()) < n) return counts;
    for (size_t i = 0; i + n <= tokens.size(); ++i) {
        ++counts[std::vector<Token>(tokens.begin() + static_cast<long>(i),
                                    tokens.begin() + static_cast<long>(i) + n)];
    }
    return counts;
}

}  // namespace detail

// Corpus BLEU with modified n-gram precision, geometric mean over n <= max_n,
// multiplicative brevity penalty, and no smoothing: any empty precision
// zeroes the score.
template <typename Token>
BleuReport bleu(const std::vector<std::vector<Token>>& hypotheses,
                const std::vector<std::vector<Token>>& references, int max_n = 4) {
    if (max_n < 1 || max_n > 4) throw std::invalid_argument("bleu: max_n must be in [1,4]");
    if (hypotheses.empty() || hypotheses.size() != references.size()) {
        throw std::invalid_argument("bleu: need equal nonempty hypothesis/reference corpora");
    }
    BleuReport report;
    std::array<long, 4> matches{};
    std::array<long, 4> totals{};
    for (size_t s = 0; s < hypotheses.size(); ++s) {
        if (references[s].empty()) {
            throw std::invalid_argument("bleu: empty reference at line " + std::to_string(s + 1));
        }
        report.hyp_length += static_cast<long>(hypotheses[s].size());
        report.ref_length += static_cast<long>(references[s].size());
        for (int n = 1; n <= max_n; ++n) {
            auto hyp_counts = detail::ngram_counts(hypotheses[s], n);
            auto ref_counts = detail::ngram_counts(references[s], n);
            for (const auto& [gram, count] : hyp_counts) {
                totals[static_cast<size_t>(n - 1)] += count;
                auto it = ref_counts.find(gram);
                if (it != ref_counts.end()) {
                    matches[static_cast<size_t>(n - 1)] += std::min(count, it->second);
                }
            }
        }
    }
    report.brevity_penalty =
        report.hyp_length >= report.ref_length || report.hyp_length == 0
            ? (report.hyp_length == 0 ? 0.0 : 1.0)
            : std::exp(1.0 - static_cast<double>(report.ref_length) /
                                 static_cast<double>(report.hyp_length));
    double log_sum = 0.0;
    bool any_zero = false;
    for (int n = 1; n <= max_n; ++n) {
        const size_t i = static_cast<size_t>(n - 1);
        report.precisions[i] =
            totals[i] == 0 ? 0.0
                           : static_cast<double>(matches[i]) / static_cast<double>(totals[i]);
        if (report.precisions[i] == 0.0) {
            any_zero = true;
        } else {
            log_sum += std::log(report.precisions[i]);
        }
    }
    report.score = any_zero ? 0.0
                            : 100.0 * report.brevity_penalty *
                                  std::exp(log_sum / static_cast<double>(max_n));
    return report;
}

}  // namespace ssmt
