#include "eegvlm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "eegvlm/error.hpp"

namespace eegvlm::eval {

SplitIndices split_dataset(std::span<const Stage> labels, int test_per_class, std::uint64_t seed) {
  if (test_per_class < 0) throw Error(ErrorCode::InvalidSpec, "test_per_class must be non-negative");
  std::mt19937_64 rng(seed);
  SplitIndices out;
  for (Stage s : kAllStages) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == s) idx.push_back(i);
    }
    if (static_cast<int>(idx.size()) < test_per_class) {
      throw Error(ErrorCode::InsufficientClass, "stage " + std::string(stage_name(s)) + " has " +
                                                    std::to_string(idx.size()) + " records, need " +
                                                    std::to_string(test_per_class));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    out.test.insert(out.test.end(), idx.begin(), idx.begin() + test_per_class);
    out.train.insert(out.train.end(), idx.begin() + test_per_class, idx.end());
  }
  std::sort(out.test.begin(), out.test.end());
  std::sort(out.train.begin(), out.train.end());
  return out;
}

ConfusionMatrix::ConfusionMatrix(int classes) : k_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {
  if (classes < 1) throw Error(ErrorCode::InvalidSpec, "confusion matrix needs at least one class");
}

long ConfusionMatrix::total() const {
  long t = 0;
  for (long c : counts_) t += c;
  return t;
}

long ConfusionMatrix::max_cell() const { return *std::max_element(counts_.begin(), counts_.end()); }

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, int classes) {
  if (truth.size() != predicted.size()) {
    throw Error(ErrorCode::LengthMismatch, "truth has " + std::to_string(truth.size()) + " labels, predictions " +
                                               std::to_string(predicted.size()));
  }
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= classes || predicted[i] < 0 || predicted[i] >= classes) {
      throw Error(ErrorCode::UnknownLabel, "label outside the class set at position " + std::to_string(i));
    }
    ++cm.at(truth[i], predicted[i]);
  }
  return cm;
}

ConfusionMatrix confusion(std::span<const Stage> truth, std::span<const Stage> predicted) {
  std::vector<int> t(truth.size()), p(predicted.size());
  std::transform(truth.begin(), truth.end(), t.begin(), stage_index);
  std::transform(predicted.begin(), predicted.end(), p.begin(), stage_index);
  return confusion(t, p, kNumStages);
}

MetricsBundle metrics(const ConfusionMatrix& cm) {
  const int k = cm.classes();
  const double n = static_cast<double>(cm.total());
  if (n <= 0) throw Error(ErrorCode::EmptyMatrix, "confusion matrix has no entries");
  std::vector<double> row(k, 0.0), col(k, 0.0);
  double trace = 0.0;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      row[i] += static_cast<double>(cm.at(i, j));
      col[j] += static_cast<double>(cm.at(i, j));
    }
    trace += static_cast<double>(cm.at(i, i));
  }
  MetricsBundle b;
  b.accuracy = trace / n;
  b.per_class_f1.resize(k);
  for (int i = 0; i < k; ++i) {
    const double tp = static_cast<double>(cm.at(i, i));
    const double precision = col[i] > 0 ? tp / col[i] : 0.0;
    const double recall = row[i] > 0 ? tp / row[i] : 0.0;
    b.per_class_f1[i] = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  }
  double sum = 0.0;
  for (double f : b.per_class_f1) sum += f;
  b.macro_f1 = sum / k;
  double pe = 0.0;
  for (int i = 0; i < k; ++i) pe += (row[i] / n) * (col[i] / n);
  if (pe >= 1.0) throw Error(ErrorCode::DegenerateKappa, "chance agreement is 1, kappa undefined");
  b.kappa = (b.accuracy - pe) / (1.0 - pe);
  return b;
}

namespace {

template <typename T>
std::string fmt(const char* spec, T v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string class_name(int i, int k) {
  return k == kNumStages ? std::string(stage_name(stage_from_index(i))) : "class" + std::to_string(i);
}

}  // namespace

std::string format_metrics_file(const MetricsBundle& b, const RunMetadata& meta) {
  std::ostringstream out;
  out << "accuracy=" << fmt("%.17g", b.accuracy) << "\n";
  out << "mf1=" << fmt("%.17g", b.macro_f1) << "\n";
  out << "kappa=" << fmt("%.17g", b.kappa) << "\n";
  const int k = static_cast<int>(b.per_class_f1.size());
  for (int i = 0; i < k; ++i) out << "f1." << lower(class_name(i, k)) << "=" << fmt("%.17g", b.per_class_f1[i]) << "\n";
  if (!meta.config_digest.empty()) out << "config_digest=" << meta.config_digest << "\n";
  for (const auto& [key, value] : meta.extra) out << key << "=" << value << "\n";
  return out.str();
}

std::map<std::string, std::string> parse_metrics_file(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

std::string format_table(const MetricsBundle& b, const ConfusionMatrix& cm, const RunMetadata& meta) {
  const int k = cm.classes();
  std::ostringstream out;
  out << meta.title << "\n";
  if (!meta.config_digest.empty()) out << "config " << meta.config_digest << "\n";
  out << "\n" << fmt("%-10s", "Accuracy") << fmt("%-10s", "MF1") << fmt("%-10s", "Kappa");
  for (int i = 0; i < k; ++i) out << fmt("%-10s", ("F1 " + class_name(i, k)).c_str());
  out << "\n" << fmt("%-10.3f", b.accuracy) << fmt("%-10.3f", b.macro_f1) << fmt("%-10.3f", b.kappa);
  for (double f : b.per_class_f1) out << fmt("%-10.3f", f);
  out << "\n\nconfusion (rows true, columns predicted)\n" << fmt("%-8s", "");
  for (int j = 0; j < k; ++j) out << fmt("%8s", class_name(j, k).c_str());
  out << "\n";
  for (int i = 0; i < k; ++i) {
    out << fmt("%-8s", class_name(i, k).c_str());
    for (int j = 0; j < k; ++j) out << fmt("%8.0f", static_cast<double>(cm.at(i, j)));
    out << "\n";
  }
  return out.str();
}

std::string bar_chart_svg(const MetricsBundle& b, const RunMetadata& meta) {
  const int k = static_cast<int>(b.per_class_f1.size());
  std::vector<std::pair<std::string, double>> bars{{"Accuracy", b.accuracy}, {"MF1", b.macro_f1}, {"Kappa", b.kappa}};
  for (int i = 0; i < k; ++i) bars.emplace_back("F1 " + class_name(i, k), b.per_class_f1[i]);
  const int bar_w = 48, gap = 16, left = 50, top = 40, plot_h = 240;
  const int width = left + static_cast<int>(bars.size()) * (bar_w + gap) + gap;
  const int height = top + plot_h + 60;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" << xml_escape(meta.title)
      << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = top + plot_h - plot_h * t / 4.0;
    svg << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << width - gap << "\" y2=\"" << y
        << "\" stroke=\"#ddd\"/>\n";
    svg << "<text x=\"" << left - 6 << "\" y=\"" << y + 4
        << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">" << fmt("%.2f", t / 4.0) << "</text>\n";
  }
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double v = std::clamp(bars[i].second, 0.0, 1.0);
    const double h = plot_h * v;
    const int x = left + gap + static_cast<int>(i) * (bar_w + gap);
    const char* color = i < 3 ? "#3b6ea8" : "#e08a3c";
    svg << "<rect class=\"bar\" data-label=\"" << xml_escape(bars[i].first) << "\" data-value=\""
        << fmt("%.6f", bars[i].second) << "\" x=\"" << x << "\" y=\"" << fmt("%.2f", top + plot_h - h)
        << "\" width=\"" << bar_w << "\" height=\"" << fmt("%.2f", h) << "\" fill=\"" << color << "\"/>\n";
    svg << "<text x=\"" << x + bar_w / 2 << "\" y=\"" << fmt("%.2f", top + plot_h - h - 4)
        << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">" << fmt("%.3f", bars[i].second)
        << "</text>\n";
    svg << "<text x=\"" << x + bar_w / 2 << "\" y=\"" << top + plot_h + 16
        << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">" << xml_escape(bars[i].first)
        << "</text>\n";
  }
  if (!meta.config_digest.empty()) {
    svg << "<text x=\"" << left << "\" y=\"" << height - 10 << "\" font-family=\"monospace\" font-size=\"9\">config "
        << meta.config_digest << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string heat_color(long count, long max_count) {
  const double t = max_count > 0 ? static_cast<double>(count) / static_cast<double>(max_count) : 0.0;
  // White to dark blue.
  const int r = static_cast<int>(std::lround(255 - t * (255 - 8)));
  const int g = static_cast<int>(std::lround(255 - t * (255 - 48)));
  const int b = static_cast<int>(std::lround(255 - t * (255 - 107)));
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

std::string heatmap_svg(const ConfusionMatrix& cm, const RunMetadata& meta) {
  const int k = cm.classes();
  const int cell = 56, left = 70, top = 50;
  const int width = left + k * cell + 20, height = top + k * cell + 50;
  const long mx = cm.max_cell();
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << xml_escape(meta.title)
      << "</text>\n";
  for (int j = 0; j < k; ++j) {
    svg << "<text x=\"" << left + j * cell + cell / 2 << "\" y=\"" << top - 6
        << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">" << class_name(j, k) << "</text>\n";
  }
  for (int i = 0; i < k; ++i) {
    svg << "<text x=\"" << left - 6 << "\" y=\"" << top + i * cell + cell / 2 + 4
        << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" << class_name(i, k) << "</text>\n";
    for (int j = 0; j < k; ++j) {
      const long c = cm.at(i, j);
      svg << "<rect class=\"cell\" data-row=\"" << i << "\" data-col=\"" << j << "\" data-count=\"" << c << "\" x=\""
          << left + j * cell << "\" y=\"" << top + i * cell << "\" width=\"" << cell << "\" height=\"" << cell
          << "\" fill=\"" << heat_color(c, mx) << "\" stroke=\"#999\"/>\n";
      const bool dark = mx > 0 && 2 * c > mx;
      svg << "<text x=\"" << left + j * cell + cell / 2 << "\" y=\"" << top + i * cell + cell / 2 + 4
          << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" fill=\""
          << (dark ? "white" : "black") << "\">" << c << "</text>\n";
    }
  }
  svg << "<text x=\"" << left << "\" y=\"" << height - 24
      << "\" font-family=\"sans-serif\" font-size=\"10\">rows: true stage, columns: predicted stage</text>\n";
  if (!meta.config_digest.empty()) {
    svg << "<text x=\"" << left << "\" y=\"" << height - 10 << "\" font-family=\"monospace\" font-size=\"9\">config "
        << meta.config_digest << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void report(const MetricsBundle& bundle, const ConfusionMatrix& cm, const RunMetadata& meta,
            const std::filesystem::path& dir) {
  if (static_cast<int>(bundle.per_class_f1.size()) != cm.classes()) {
    throw Error(ErrorCode::ShapeMismatch, "metrics and confusion matrix disagree on the class count");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
  auto write = [&](const std::string& name, const std::string& content) {
    const auto tmp = dir / (name + ".tmp");
    {
      std::ofstream out(tmp, std::ios::binary);
      out << content;
      if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + tmp.string());
    }
    std::filesystem::rename(tmp, dir / name, ec);
    if (ec) throw Error(ErrorCode::IoFailure, "cannot move " + tmp.string() + ": " + ec.message());
  };
  write("metrics.txt", format_metrics_file(bundle, meta));
  write("table.txt", format_table(bundle, cm, meta));
  write("scores.svg", bar_chart_svg(bundle, meta));
  write("confusion.svg", heatmap_svg(cm, meta));
}

}  // namespace eegvlm::eval
