#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace eegvlm {

// AASM sleep stages in the fixed class order used everywhere (confusion
// matrices, logits, reports).
enum class Stage : int { Wake = 0, N1 = 1, N2 = 2, N3 = 3, REM = 4 };

inline constexpr int kNumStages = 5;
inline constexpr std::array<Stage, kNumStages> kAllStages = {
    Stage::Wake, Stage::N1, Stage::N2, Stage::N3, Stage::REM};

constexpr int stage_index(Stage s) { return static_cast<int>(s); }
Stage stage_from_index(int index);

// Canonical display name: "Wake", "N1", "N2", "N3", "REM".
std::string_view stage_name(Stage s);

// Exact canonical-name lookup (case-insensitive). Synonym handling lives in
// extract_stage.
std::optional<Stage> parse_stage_name(std::string_view text);

}  // namespace eegvlm
