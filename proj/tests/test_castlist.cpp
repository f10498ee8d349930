#include "doctest.h"

#include <algorithm>

#include "carn/castlist.hpp"
#include "carn/errors.hpp"

using namespace carn;

namespace {

Clip clip_with_speakers(const std::vector<std::string>& speakers) {
  Clip c;
  c.clip_id = "c";
  double t = 0;
  for (const auto& s : speakers) {
    c.subtitles.push_back({s, {"hi"}, t, t + 1});
    t += 2;
  }
  return c;
}

// Straightforward restatement of the selection rule for comparison.
std::vector<std::string> oracle(const std::map<std::string, long>& counts, long min_count,
                                double ratio) {
  long top = 0;
  for (const auto& kv : counts) top = std::max(top, kv.second);
  std::vector<std::pair<long, std::string>> keep;
  for (const auto& kv : counts) {
    bool frequent = kv.second > min_count;
    bool share = kv.second * 1.0 >= ratio * top;
    if (frequent && share) keep.push_back({-kv.second, kv.first});
  }
  std::sort(keep.begin(), keep.end());
  std::vector<std::string> out;
  for (auto& p : keep) out.push_back(p.second);
  return out;
}

}  // namespace

TEST_CASE("count_speakers is an exact multiset count") {
  auto counts = count_speakers({clip_with_speakers({"Ted", "Lily", "Ted"})});
  CHECK(counts == std::map<std::string, long>{{"Lily", 1}, {"Ted", 2}});
  CHECK(count_speakers({clip_with_speakers({})}).empty());
  auto cased = count_speakers({clip_with_speakers({"ted", "Ted"})});
  CHECK(cased.size() == 2);
}

TEST_CASE("build_cast_list worked examples") {
  auto cast = build_cast_list({{"Ted", 900}, {"Lily", 620}, {"Marshall", 510}, {"Guest", 60}});
  CHECK(cast.names == std::vector<std::string>{"Ted", "Lily", "Marshall"});
  CHECK(cast.k() == 3);
  CHECK(cast.unk_index == 3);
  CHECK(cast.counts == std::vector<long>{900, 620, 510});

  auto single = build_cast_list({{"A", 2000}, {"B", 150}});
  CHECK(single.names == std::vector<std::string>{"A"});

  CHECK_THROWS_AS(build_cast_list({{"A", 499}}), EmptyCastError);
  CHECK_THROWS_AS(build_cast_list({{"A", 500}}), EmptyCastError);
  CHECK(build_cast_list({{"A", 501}}).k() == 1);
}

TEST_CASE("ratio filter uses the maximum over all speakers") {
  // B passes min_count but not the 1/10 share of A.
  auto cast = build_cast_list({{"A", 10000}, {"B", 999}, {"C", 1000}});
  CHECK(cast.names == std::vector<std::string>{"A", "C"});
  // Equality with the share passes; one below fails.
  auto edge = build_cast_list({{"A", 1000}, {"B", 100}, {"C", 99}}, 50, 0.1);
  CHECK(edge.names == std::vector<std::string>{"A", "B"});
}

TEST_CASE("ties are broken by name") {
  auto cast = build_cast_list({{"Zed", 600}, {"Amy", 600}, {"Bob", 700}});
  CHECK(cast.names == std::vector<std::string>{"Bob", "Amy", "Zed"});
}

TEST_CASE("build_cast_list argument checks") {
  CHECK_THROWS_AS(build_cast_list({}), EmptyCastError);
  CHECK_THROWS_AS(build_cast_list({{"A", 5}}, 0, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(build_cast_list({{"A", 5}}, 1, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(build_cast_list({{"A", 5}}, 1, 1.5), std::invalid_argument);
}

TEST_CASE("build_cast_list agrees with the rule on every small table") {
  const std::vector<long> values = {1, 2, 3, 9, 10, 50, 499, 500, 501, 900, 5000};
  const std::vector<std::pair<long, double>> settings = {
      {500, 0.1}, {2, 0.1}, {9, 0.5}, {1, 1.0}, {499, 0.01}};
  long cases = 0;
  for (auto [m, r] : settings) {
    for (long a : values) {
      for (long b : values) {
        for (long c : values) {
          std::map<std::string, long> counts{{"ann", a}, {"bob", b}, {"cid", c}};
          auto expect = oracle(counts, m, r);
          ++cases;
          if (expect.empty()) {
            CHECK_THROWS_AS(build_cast_list(counts, m, r), EmptyCastError);
          } else {
            auto cast = build_cast_list(counts, m, r);
            REQUIRE(cast.names == expect);
            for (int i = 0; i < cast.k(); ++i) CHECK(cast.counts[i] == counts[cast.names[i]]);
          }
        }
      }
    }
  }
  CHECK(cases == 5 * 11 * 11 * 11);
}

TEST_CASE("map_speaker") {
  CastList cast;
  cast.names = {"Ted", "Lily", "Marshall"};
  cast.counts = {3, 2, 1};
  cast.unk_index = 3;
  CHECK(map_speaker("Ted", cast) == 0);
  CHECK(map_speaker("Marshall", cast) == 2);
  CHECK(map_speaker("RandomGuy", cast) == 3);
  CHECK(map_speaker("ted", cast) == 3);
}

TEST_CASE("scaled minimum count") {
  CHECK(scaled_min_count(152500) == 500);
  CHECK(scaled_min_count(152501) == 501);
  CHECK(scaled_min_count(1000) == 4);
  CHECK(scaled_min_count(10) == 2);
}

TEST_CASE("cast list is stable under clip permutation") {
  auto a = clip_with_speakers({"Ted", "Ted", "Ted", "Lily", "Lily", "Lily", "Bob"});
  auto b = clip_with_speakers({"Lily", "Ted", "Zoe"});
  auto ab = build_cast_list(count_speakers({a, b}), 2, 0.1);
  auto ba = build_cast_list(count_speakers({b, a}), 2, 0.1);
  CHECK(ab == ba);
  CHECK(ab.names == std::vector<std::string>{"Lily", "Ted"});
}
