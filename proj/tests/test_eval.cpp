#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include "eegvlm/error.hpp"
#include "eegvlm/eval.hpp"

using namespace eegvlm;
using namespace eegvlm::eval;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::IoFailure;
}

ConfusionMatrix from_rows(const std::vector<std::vector<long>>& rows) {
  ConfusionMatrix cm(static_cast<int>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows.size(); ++j) cm.at(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
  }
  return cm;
}

// Metrics straight from the label vectors, without a confusion matrix.
MetricsBundle first_principles(const std::vector<int>& t, const std::vector<int>& p, int k) {
  const double n = static_cast<double>(t.size());
  MetricsBundle m;
  double agree = 0.0, chance = 0.0;
  for (int c = 0; c < k; ++c) {
    double tp = 0, true_c = 0, pred_c = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      tp += (t[i] == c && p[i] == c);
      true_c += t[i] == c;
      pred_c += p[i] == c;
    }
    agree += tp;
    chance += (true_c / n) * (pred_c / n);
    const double precision = pred_c > 0 ? tp / pred_c : 0.0;
    const double recall = true_c > 0 ? tp / true_c : 0.0;
    m.per_class_f1.push_back(precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0);
  }
  m.accuracy = agree / n;
  m.macro_f1 = std::accumulate(m.per_class_f1.begin(), m.per_class_f1.end(), 0.0) / k;
  m.kappa = (m.accuracy - chance) / (1.0 - chance);
  return m;
}

double luminance(const std::string& hex) {
  const int r = std::stoi(hex.substr(1, 2), nullptr, 16);
  const int g = std::stoi(hex.substr(3, 2), nullptr, 16);
  const int b = std::stoi(hex.substr(5, 2), nullptr, 16);
  return 0.2126 * r + 0.7152 * g + 0.0722 * b;
}

}  // namespace

TEST_CASE("worked two-class examples") {
  const auto m = metrics(from_rows({{40, 10}, {20, 30}}));
  CHECK(m.accuracy == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(m.kappa == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(m.per_class_f1[0] == doctest::Approx(80.0 / 110.0).epsilon(1e-12));
  CHECK(m.per_class_f1[1] == doctest::Approx(60.0 / 90.0).epsilon(1e-12));
  CHECK(m.per_class_f1[0] == doctest::Approx(0.7273).epsilon(1e-4));
  CHECK(m.per_class_f1[1] == doctest::Approx(0.6667).epsilon(1e-4));
  CHECK(m.macro_f1 == doctest::Approx(0.6970).epsilon(1e-4));

  CHECK(metrics(from_rows({{25, 25}, {25, 25}})).kappa == 0.0);
  const auto perfect = metrics(from_rows({{7, 0}, {0, 3}}));
  CHECK(perfect.kappa == 1.0);
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.macro_f1 == 1.0);
}

TEST_CASE("confusion tallies and errors") {
  const std::vector<int> ten(10, 2);
  const auto diag = confusion(ten, ten);
  CHECK(diag.at(2, 2) == 10);
  CHECK(diag.total() == 10);

  const std::vector<Stage> t{Stage::Wake}, p{Stage::N1};
  const auto one = confusion(t, p);
  CHECK(one.at(0, 1) == 1);
  CHECK(one.total() == 1);

  const std::vector<int> a{0, 1}, b{0};
  CHECK(code_of([&] { confusion(a, b); }) == ErrorCode::LengthMismatch);
  const std::vector<int> bad{0, 7};
  CHECK(code_of([&] { confusion(bad, a); }) == ErrorCode::UnknownLabel);
  const std::vector<int> neg{-1, 0};
  CHECK(code_of([&] { confusion(a, neg); }) == ErrorCode::UnknownLabel);

  CHECK(code_of([] { metrics(ConfusionMatrix()); }) == ErrorCode::EmptyMatrix);
  // Everyone true and predicted in one class: chance agreement is 1.
  CHECK(code_of([] { metrics(from_rows({{5, 0}, {0, 0}})); }) == ErrorCode::DegenerateKappa);
}

TEST_CASE("metrics match a first-principles tally on random labels") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 20 + static_cast<int>(rng() % 200);
    std::vector<int> t(n), p(n);
    for (int i = 0; i < n; ++i) {
      t[i] = static_cast<int>(rng() % 5);
      // Bias toward agreement so kappa is not always near zero.
      p[i] = rng() % 3 == 0 ? static_cast<int>(rng() % 5) : t[i];
    }
    const auto cm = confusion(t, p);
    ConfusionMatrix tally;
    for (int i = 0; i < n; ++i) ++tally.at(t[i], p[i]);
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 5; ++j) CHECK(cm.at(i, j) == tally.at(i, j));
    }
    const auto m = metrics(cm);
    const auto oracle = first_principles(t, p, 5);
    CHECK(std::abs(m.accuracy - oracle.accuracy) < 1e-9);
    CHECK(std::abs(m.macro_f1 - oracle.macro_f1) < 1e-9);
    CHECK(std::abs(m.kappa - oracle.kappa) < 1e-9);
    for (int c = 0; c < 5; ++c) CHECK(std::abs(m.per_class_f1[c] - oracle.per_class_f1[c]) < 1e-9);
    CHECK(std::abs(m.macro_f1 - std::accumulate(m.per_class_f1.begin(), m.per_class_f1.end(), 0.0) / 5) < 1e-12);
  }
}

TEST_CASE("metric properties") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    ConfusionMatrix cm;
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 5; ++j) cm.at(i, j) = static_cast<long>(rng() % (i == j ? 30 : 8));
    }
    cm.at(0, 0) += 1;
    const auto m = metrics(cm);

    std::array<int, 5> perm{0, 1, 2, 3, 4};
    std::shuffle(perm.begin(), perm.end(), rng);
    ConfusionMatrix permuted;
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 5; ++j) permuted.at(perm[i], perm[j]) = cm.at(i, j);
    }
    const auto mp = metrics(permuted);
    CHECK(mp.accuracy == doctest::Approx(m.accuracy).epsilon(1e-12));
    CHECK(mp.macro_f1 == doctest::Approx(m.macro_f1).epsilon(1e-12));
    CHECK(mp.kappa == doctest::Approx(m.kappa).epsilon(1e-12));

    // Accuracy equals the support-weighted mean of per-class recall.
    double weighted = 0.0;
    for (int i = 0; i < 5; ++i) {
      long row = 0;
      for (int j = 0; j < 5; ++j) row += cm.at(i, j);
      if (row > 0) weighted += static_cast<double>(row) * (static_cast<double>(cm.at(i, i)) / row);
    }
    CHECK(weighted / static_cast<double>(cm.total()) == doctest::Approx(m.accuracy).epsilon(1e-12));

    const int c = static_cast<int>(rng() % 5);
    ConfusionMatrix plus = cm;
    ++plus.at(c, c);
    CHECK(metrics(plus).accuracy >= m.accuracy);

    bool diagonal = true;
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 5; ++j) diagonal &= i == j || cm.at(i, j) == 0;
    }
    CHECK((m.kappa == doctest::Approx(1.0).epsilon(1e-15)) == diagonal);
  }
}

TEST_CASE("split protocol on the replayed class inventory") {
  const int counts[5] = {1175, 1186, 757, 836, 1165};
  std::vector<Stage> labels;
  for (int s = 0; s < 5; ++s) labels.insert(labels.end(), counts[s], stage_from_index(s));
  std::mt19937_64 rng(1);
  std::shuffle(labels.begin(), labels.end(), rng);
  REQUIRE(labels.size() == 5119);

  const auto split = split_dataset(labels, 75, 2024);
  CHECK(split.test.size() == 375);
  CHECK(split.train.size() == 4744);
  std::array<int, 5> per_class{};
  for (auto i : split.test) ++per_class[stage_index(labels[i])];
  for (int c : per_class) CHECK(c == 75);
  std::set<std::size_t> all(split.test.begin(), split.test.end());
  all.insert(split.train.begin(), split.train.end());
  CHECK(all.size() == 5119);
  CHECK(std::is_sorted(split.test.begin(), split.test.end()));

  const auto again = split_dataset(labels, 75, 2024);
  CHECK(again.test == split.test);
  CHECK(split_dataset(labels, 75, 2025).test != split.test);

  std::vector<Stage> short_class(74, Stage::N1);
  for (Stage s : {Stage::Wake, Stage::N2, Stage::N3, Stage::REM}) short_class.insert(short_class.end(), 80, s);
  CHECK(code_of([&] { split_dataset(short_class, 75, 1); }) == ErrorCode::InsufficientClass);
}

TEST_CASE("metrics file round-trip and the perfect table") {
  MetricsBundle b;
  b.accuracy = 0.123456789012345;
  b.macro_f1 = 2.0 / 3.0;
  b.kappa = -0.1;
  b.per_class_f1 = {0.1, 0.2, 1.0 / 3.0, 0.4, 0.987654321};
  RunMetadata meta;
  meta.config_digest = "abcdef0123456789";
  const auto parsed = parse_metrics_file(format_metrics_file(b, meta));
  CHECK(std::abs(std::stod(parsed.at("accuracy")) - b.accuracy) < 1e-9);
  CHECK(std::abs(std::stod(parsed.at("mf1")) - b.macro_f1) < 1e-9);
  CHECK(std::abs(std::stod(parsed.at("kappa")) - b.kappa) < 1e-9);
  const char* keys[5] = {"f1.wake", "f1.n1", "f1.n2", "f1.n3", "f1.rem"};
  for (int i = 0; i < 5; ++i) CHECK(std::abs(std::stod(parsed.at(keys[i])) - b.per_class_f1[i]) < 1e-9);
  CHECK(parsed.at("config_digest") == meta.config_digest);

  ConfusionMatrix cm;
  for (int i = 0; i < 5; ++i) cm.at(i, i) = 4;
  const auto perfect = metrics(cm);
  const auto table = format_table(perfect, cm, meta);
  std::istringstream lines(table);
  std::string line;
  while (std::getline(lines, line) && line.find("Accuracy") == std::string::npos) {
  }
  std::getline(lines, line);
  std::istringstream cells(line);
  std::string cell;
  int n = 0;
  while (cells >> cell) {
    CHECK(cell == "1.000");
    ++n;
  }
  CHECK(n == 8);
}

TEST_CASE("heatmap colors follow count order") {
  const auto cm = from_rows({{50, 3, 0, 1, 9}, {2, 31, 5, 0, 0}, {7, 4, 44, 12, 1},
                             {0, 0, 6, 60, 0}, {8, 15, 2, 0, 22}});
  const auto svg = heatmap_svg(cm, {});
  const std::regex cell(R"re(data-count="(\d+)"[^>]*fill="(#[0-9a-f]{6})")re");
  std::vector<std::pair<long, double>> seen;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), cell); it != std::sregex_iterator(); ++it) {
    seen.emplace_back(std::stol((*it)[1]), luminance((*it)[2]));
  }
  REQUIRE(seen.size() == 25);
  for (const auto& [ca, la] : seen) {
    for (const auto& [cb, lb] : seen) {
      if (ca < cb) CHECK(la > lb);
      if (ca == cb) CHECK(la == lb);
    }
  }
  CHECK(heat_color(0, 60) == "#ffffff");
}

TEST_CASE("report writes all four artifacts deterministically") {
  const auto dir = std::filesystem::temp_directory_path() / "eegvlm_report_test";
  std::filesystem::remove_all(dir);
  const auto cm = from_rows({{5, 1, 0, 0, 0}, {0, 4, 1, 0, 1}, {0, 0, 6, 0, 0}, {0, 0, 1, 5, 0}, {1, 0, 0, 0, 5}});
  const auto m = metrics(cm);
  RunMetadata meta;
  meta.title = "toy <run>";
  report(m, cm, meta, dir);
  std::map<std::string, std::string> first;
  for (const char* f : {"metrics.txt", "table.txt", "scores.svg", "confusion.svg"}) {
    std::ifstream in(dir / f);
    REQUIRE(in);
    first[f] = std::string(std::istreambuf_iterator<char>(in), {});
    CHECK(!first[f].empty());
  }
  CHECK(first["scores.svg"].find("toy &lt;run&gt;") != std::string::npos);
  report(m, cm, meta, dir);
  for (const auto& [f, text] : first) {
    std::ifstream in(dir / f);
    CHECK(std::string(std::istreambuf_iterator<char>(in), {}) == text);
  }
  std::filesystem::remove_all(dir);

  const auto blocked = std::filesystem::temp_directory_path() / "eegvlm_report_blocked";
  std::filesystem::remove_all(blocked);
  std::ofstream(blocked) << "file, not a directory";
  CHECK(code_of([&] { report(m, cm, meta, blocked / "sub"); }) == ErrorCode::IoFailure);
  std::filesystem::remove(blocked);
}
