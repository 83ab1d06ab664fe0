#pragma once

#include <optional>
#include <string>
#include <vector>

namespace favor {

/// One classification item; `features` stands in for the image.
struct LabeledInstance {
  std::string id;
  int class_index = 0;
  std::vector<double> features;
  std::optional<std::string> source;

  friend bool operator==(const LabeledInstance&, const LabeledInstance&) = default;
};

}  // namespace favor
