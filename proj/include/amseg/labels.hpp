#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>

namespace amseg {

// Order doubles as the argmax tie-break: B < I < O.
enum class Label : std::uint8_t { B = 0, I = 1, O = 2 };

inline constexpr std::array<Label, 3> kAllLabels = {Label::B, Label::I, Label::O};

constexpr std::string_view label_name(Label l) {
  switch (l) {
    case Label::B:
      return "B";
    case Label::I:
      return "I";
    case Label::O:
      return "O";
  }
  return "?";
}

constexpr std::optional<Label> parse_label(std::string_view s) {
  if (s == "B") return Label::B;
  if (s == "I") return Label::I;
  if (s == "O") return Label::O;
  return std::nullopt;
}

constexpr int label_index(Label l) { return static_cast<int>(l); }

}  // namespace amseg
