#ifndef CARN_CASTLIST_HPP
#define CARN_CASTLIST_HPP

// Principal character list derived from subtitle speaker counts.

#include <map>
#include <string>
#include <vector>

#include "carn/corpus.hpp"

namespace carn {

inline constexpr int kPaperMinCount = 500;
inline constexpr double kPaperMaxRatio = 0.1;

struct CastList {
  std::vector<std::string> names;  // descending count, ties by name
  std::vector<long> counts;
  int unk_index = 0;  // == names.size()

  int k() const { return static_cast<int>(names.size()); }
  /// Label space size including UNKNAME.
  int classes() const { return k() + 1; }
  bool operator==(const CastList&) const = default;
};

/// Exact, case-sensitive multiset count of subtitle speakers.
std::map<std::string, long> count_speakers(const std::vector<Clip>& clips);

/// Keeps names with count > min_count and count >= max_ratio * (max count
/// over all speakers). Throws EmptyCastError when nothing survives.
CastList build_cast_list(const std::map<std::string, long>& counts,
                         long min_count = kPaperMinCount, double max_ratio = kPaperMaxRatio);

/// Occurrence threshold scaled to corpus volume: 500 * lines / 152500,
/// rounded up, at least 2.
long scaled_min_count(long total_lines);

/// Index of `name` in the cast, or unk_index.
int map_speaker(const std::string& name, const CastList& cast);

}  // namespace carn

#endif  // CARN_CASTLIST_HPP
