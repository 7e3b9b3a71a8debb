#include "eegvlm/stage.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

namespace eegvlm {

Stage stage_from_index(int index) {
  if (index < 0 || index >= kNumStages) {
    throw std::out_of_range("stage index out of range: " + std::to_string(index));
  }
  return static_cast<Stage>(index);
}

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::Wake: return "Wake";
    case Stage::N1: return "N1";
    case Stage::N2: return "N2";
    case Stage::N3: return "N3";
    case Stage::REM: return "REM";
  }
  return "?";
}

std::optional<Stage> parse_stage_name(std::string_view text) {
  std::string lowered(text);
  std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  for (Stage s : kAllStages) {
    std::string name(stage_name(s));
    std::transform(name.begin(), name.end(), name.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    if (name == lowered) return s;
  }
  return std::nullopt;
}

}  // namespace eegvlm
