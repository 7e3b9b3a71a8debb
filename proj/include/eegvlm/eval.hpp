#pragma once

// Splits, confusion matrices, accuracy / F1 / MF1 / Cohen's kappa and report
// emission.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "eegvlm/stage.hpp"

namespace eegvlm::eval {

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Uniform per-class sampling without replacement; both index lists ascending.
// Throws InsufficientClass.
SplitIndices split_dataset(std::span<const Stage> labels, int test_per_class, std::uint64_t seed);

// Rows are the true class, columns the predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes = kNumStages);

  int classes() const { return k_; }
  long at(int truth, int predicted) const { return counts_[static_cast<std::size_t>(truth) * k_ + predicted]; }
  long& at(int truth, int predicted) { return counts_[static_cast<std::size_t>(truth) * k_ + predicted]; }
  long total() const;
  long max_cell() const;

 private:
  int k_;
  std::vector<long> counts_;
};

// Throws LengthMismatch or UnknownLabel (labels outside [0, classes)).
ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, int classes = kNumStages);
ConfusionMatrix confusion(std::span<const Stage> truth, std::span<const Stage> predicted);

struct MetricsBundle {
  double accuracy = 0.0;
  std::vector<double> per_class_f1;
  double macro_f1 = 0.0;
  double kappa = 0.0;
};

// Throws EmptyMatrix or DegenerateKappa.
MetricsBundle metrics(const ConfusionMatrix& cm);

struct RunMetadata {
  std::string title = "evaluation";
  std::string config_digest;
  std::map<std::string, std::string> extra;
};

// key=value lines with the fixed keys accuracy, mf1, kappa, f1.<stage>.
std::string format_metrics_file(const MetricsBundle& bundle, const RunMetadata& meta);
std::map<std::string, std::string> parse_metrics_file(const std::string& text);
std::string format_table(const MetricsBundle& bundle, const ConfusionMatrix& cm, const RunMetadata& meta);
std::string bar_chart_svg(const MetricsBundle& bundle, const RunMetadata& meta);
std::string heatmap_svg(const ConfusionMatrix& cm, const RunMetadata& meta);
// Cell fill for a count, darker for larger counts.
std::string heat_color(long count, long max_count);

// Writes metrics.txt, table.txt, scores.svg and confusion.svg into dir.
// Throws IoFailure.
void report(const MetricsBundle& bundle, const ConfusionMatrix& cm, const RunMetadata& meta,
            const std::filesystem::path& dir);

}  // namespace eegvlm::eval
