#include "carn/castlist.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "carn/errors.hpp"

namespace carn {

std::map<std::string, long> count_speakers(const std::vector<Clip>& clips) {
  std::map<std::string, long> counts;
  for (const auto& clip : clips) {
    for (const auto& line : clip.subtitles) ++counts[line.speaker];
  }
  return counts;
}

CastList build_cast_list(const std::map<std::string, long>& counts, long min_count,
                         double max_ratio) {
  if (counts.empty()) throw EmptyCastError("no speakers to build a cast list from");
  if (min_count < 1) throw std::invalid_argument("min_count must be at least 1");
  if (!(max_ratio > 0 && max_ratio <= 1)) {
    throw std::invalid_argument("max_ratio must lie in (0, 1]");
  }
  long top = 0;
  for (const auto& [name, n] : counts) top = std::max(top, n);

  std::vector<std::pair<std::string, long>> kept;
  for (const auto& [name, n] : counts) {
    if (n > min_count && static_cast<double>(n) >= max_ratio * static_cast<double>(top)) {
      kept.emplace_back(name, n);
    }
  }
  if (kept.empty()) {
    throw EmptyCastError("no speaker occurs more than " + std::to_string(min_count) +
                         " times; the cast list is empty");
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });

  CastList cast;
  for (auto& [name, n] : kept) {
    cast.names.push_back(name);
    cast.counts.push_back(n);
  }
  cast.unk_index = cast.k();
  return cast;
}

long scaled_min_count(long total_lines) {
  const double scaled = std::ceil(500.0 * static_cast<double>(total_lines) / 152500.0);
  return std::max(2L, static_cast<long>(scaled));
}

int map_speaker(const std::string& name, const CastList& cast) {
  auto it = std::find(cast.names.begin(), cast.names.end(), name);
  return it == cast.names.end() ? cast.unk_index : static_cast<int>(it - cast.names.begin());
}

}  // namespace carn
