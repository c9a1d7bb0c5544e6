#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ontoext/error.hpp"

namespace ontoext {

// Dense row-major matrix for metric inputs ([molecules x labels]).
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

using LabelMatrix = Matrix<std::uint8_t>;
using ScoreMatrix = Matrix<double>;

enum class Averaging { kSamples, kMicro, kMacro, kWeighted };

inline constexpr std::array<Averaging, 4> kAllAveragings = {Averaging::kSamples, Averaging::kMicro, Averaging::kMacro,
                                                           Averaging::kWeighted};

inline std::string_view to_string(Averaging a) {
  switch (a) {
    case Averaging::kSamples: return "samples";
    case Averaging::kMicro: return "micro";
    case Averaging::kMacro: return "macro";
    case Averaging::kWeighted: return "weighted";
  }
  return "?";
}

// y_pred = 1 iff score >= threshold.
inline LabelMatrix binarize(const ScoreMatrix& scores, double threshold) {
  LabelMatrix out(scores.rows, scores.cols, 0);
  for (std::size_t i = 0; i < scores.data.size(); ++i) out.data[i] = scores.data[i] >= threshold ? 1 : 0;
  return out;
}

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct Counts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

// Zero denominators yield 0.
inline Prf prf_from_counts(const Counts& c) {
  Prf r;
  if (c.tp + c.fp > 0) r.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  if (c.tp + c.fn > 0) r.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (r.precision + r.recall > 0.0) r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

namespace detail {

template <typename A, typename B>
void require_same_shape(const Matrix<A>& a, const Matrix<B>& b) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw Error(ErrorKind::kInvalidArgument, "shape mismatch: " + std::to_string(a.rows) + "x" +
                                                 std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                                                 std::to_string(b.cols));
}

inline void tally(Counts& c, std::uint8_t t, std::uint8_t p) {
  if (t && p) ++c.tp;
  else if (!t && p) ++c.fp;
  else if (t && !p) ++c.fn;
}

}  // namespace detail

inline std::vector<Counts> row_counts(const LabelMatrix& y_true, const LabelMatrix& y_pred) {
  std::vector<Counts> rows(y_true.rows);
  for (std::size_t i = 0; i < y_true.rows; ++i)
    for (std::size_t j = 0; j < y_true.cols; ++j) detail::tally(rows[i], y_true(i, j), y_pred(i, j));
  return rows;
}

inline std::vector<Counts> column_counts(const LabelMatrix& y_true, const LabelMatrix& y_pred) {
  std::vector<Counts> cols(y_true.cols);
  for (std::size_t i = 0; i < y_true.rows; ++i)
    for (std::size_t j = 0; j < y_true.cols; ++j) detail::tally(cols[j], y_true(i, j), y_pred(i, j));
  return cols;
}

inline Prf prf(const LabelMatrix& y_true, const LabelMatrix& y_pred, Averaging averaging) {
  detail::require_same_shape(y_true, y_pred);
  if (y_true.cols == 0) throw Error(ErrorKind::kInvalidArgument, "need at least one label column");

  auto mean_of = [](const std::vector<Prf>& parts, const std::vector<double>* weights) {
    Prf out;
    if (parts.empty()) return out;
    double wsum = 0.0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const double w = weights ? (*weights)[i] : 1.0;
      out.precision += w * parts[i].precision;
      out.recall += w * parts[i].recall;
      out.f1 += w * parts[i].f1;
      wsum += w;
    }
    if (wsum == 0.0) return Prf{};
    out.precision /= wsum;
    out.recall /= wsum;
    out.f1 /= wsum;
    return out;
  };

  switch (averaging) {
    case Averaging::kMicro: {
      Counts total;
      for (const auto& c : column_counts(y_true, y_pred)) {
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn += c.fn;
      }
      return prf_from_counts(total);
    }
    case Averaging::kSamples: {
      std::vector<Prf> parts;
      for (const auto& c : row_counts(y_true, y_pred)) parts.push_back(prf_from_counts(c));
      return mean_of(parts, nullptr);
    }
    case Averaging::kMacro:
    case Averaging::kWeighted: {
      std::vector<Prf> parts;
      std::vector<double> support;
      for (const auto& c : column_counts(y_true, y_pred)) {
        parts.push_back(prf_from_counts(c));
        support.push_back(static_cast<double>(c.tp + c.fn));
      }
      return mean_of(parts, averaging == Averaging::kWeighted ? &support : nullptr);
    }
  }
  return {};
}

// Mann-Whitney AUC: P(score of random positive > score of random negative),
// ties counted 1/2. Empty when either class is absent.
inline std::optional<double> binary_auc(const std::vector<std::uint8_t>& truth, const std::vector<double>& scores) {
  const std::size_t n = truth.size();
  std::size_t pos = 0;
  for (auto t : truth) pos += t ? 1 : 0;
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the midrank sum keeps everything integral until the final divide.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t twice_mid = static_cast<std::uint64_t>(i + 1 + j);  // 2 * average of ranks i+1..j
    for (std::size_t r = i; r < j; ++r)
      if (truth[order[r]]) twice_rank_sum += twice_mid;
    i = j;
  }
  const double u = (static_cast<double>(twice_rank_sum) - static_cast<double>(pos) * static_cast<double>(pos + 1)) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

struct AucResult {
  std::optional<double> value;
  std::size_t excluded = 0;  // columns (or rows, for samples) with a single class
};

inline AucResult roc_auc(const LabelMatrix& y_true, const ScoreMatrix& y_score, Averaging averaging) {
  detail::require_same_shape(y_true, y_score);
  AucResult out;
  if (averaging == Averaging::kMicro) {
    std::vector<std::uint8_t> t(y_true.data.begin(), y_true.data.end());
    out.value = binary_auc(t, y_score.data);
    if (!out.value) out.excluded = 1;
    return out;
  }
  double acc = 0.0, wsum = 0.0;
  const bool by_row = averaging == Averaging::kSamples;
  const std::size_t groups = by_row ? y_true.rows : y_true.cols;
  const std::size_t len = by_row ? y_true.cols : y_true.rows;
  std::vector<std::uint8_t> t(len);
  std::vector<double> s(len);
  for (std::size_t g = 0; g < groups; ++g) {
    std::size_t support = 0;
    for (std::size_t i = 0; i < len; ++i) {
      t[i] = by_row ? y_true(g, i) : y_true(i, g);
      s[i] = by_row ? y_score(g, i) : y_score(i, g);
      support += t[i];
    }
    auto auc = binary_auc(t, s);
    if (!auc) {
      ++out.excluded;
      continue;
    }
    const double w = averaging == Averaging::kWeighted ? static_cast<double>(support) : 1.0;
    acc += w * *auc;
    wsum += w;
  }
  if (wsum > 0.0) out.value = acc / wsum;
  return out;
}

struct AveragedMetrics {
  Prf prf;
  AucResult auc;
};

struct MetricReport {
  std::array<AveragedMetrics, 4> by_averaging;  // indexed like kAllAveragings
  std::size_t molecules = 0;
  std::size_t labels = 0;
  double threshold = 0.5;

  const AveragedMetrics& operator[](Averaging a) const { return by_averaging[static_cast<std::size_t>(a)]; }
  AveragedMetrics& operator[](Averaging a) { return by_averaging[static_cast<std::size_t>(a)]; }
};

inline MetricReport metric_report(const LabelMatrix& y_true, const ScoreMatrix& y_score, double threshold) {
  detail::require_same_shape(y_true, y_score);
  MetricReport rep;
  rep.molecules = y_true.rows;
  rep.labels = y_true.cols;
  rep.threshold = threshold;
  const auto y_pred = binarize(y_score, threshold);
  for (auto a : kAllAveragings) {
    rep[a].prf = prf(y_true, y_pred, a);
    rep[a].auc = roc_auc(y_true, y_score, a);
  }
  return rep;
}

// F1 per label column and per molecule row.
inline std::vector<double> per_class_f1(const LabelMatrix& y_true, const LabelMatrix& y_pred) {
  std::vector<double> out;
  for (const auto& c : column_counts(y_true, y_pred)) out.push_back(prf_from_counts(c).f1);
  return out;
}

inline std::vector<double> per_molecule_f1(const LabelMatrix& y_true, const LabelMatrix& y_pred) {
  std::vector<double> out;
  for (const auto& c : row_counts(y_true, y_pred)) out.push_back(prf_from_counts(c).f1);
  return out;
}

}  // namespace ontoext
