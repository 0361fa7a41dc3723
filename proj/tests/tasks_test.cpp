#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <regex>
#include <set>
#include <sstream>

#include "longact/tasks.hpp"

using namespace longact;

namespace {

// Oracles work on the rendered text only.
std::string scan_needle(const std::string& context, const std::string& key) {
  static const std::regex pair(R"((k\d\d) = (v\d\d) ;)");
  std::string found;
  int hits = 0;
  for (std::sregex_iterator it(context.begin(), context.end(), pair), end; it != end; ++it) {
    if ((*it)[1] == key) {
      found = (*it)[2];
      ++hits;
    }
  }
  return hits == 1 ? found : "";
}

std::string count_most_common(const std::string& context, std::size_t n) {
  std::map<std::string, int> freq;
  std::istringstream is(context);
  std::string w;
  while (is >> w) freq[w]++;
  std::vector<std::pair<int, std::string>> ranked;
  for (auto& [word, c] : freq) ranked.emplace_back(-c, word);
  std::sort(ranked.begin(), ranked.end());
  // the n-th and (n+1)-th counts must differ for the answer to be well defined
  if (ranked.size() > n && ranked[n - 1].first == ranked[n].first) return "<tie>";
  std::vector<std::string> top;
  for (std::size_t i = 0; i < n; ++i) top.push_back(ranked[i].second);
  std::sort(top.begin(), top.end());
  std::string out;
  for (std::size_t i = 0; i < top.size(); ++i) out += (i ? " " : "") + top[i];
  return out;
}

std::string chase_pointer(const std::string& context, const std::string& var) {
  static const std::regex assign(R"((k\d\d) = ([kv]\d\d) ;)");
  std::map<std::string, std::string> rhs;
  for (std::sregex_iterator it(context.begin(), context.end(), assign), end; it != end; ++it) {
    rhs[(*it)[1]] = (*it)[2];
  }
  std::string cur = var;
  for (int guard = 0; guard < 100 && cur[0] == 'k'; ++guard) {
    auto f = rhs.find(cur);
    if (f == rhs.end()) return "";
    cur = f->second;
  }
  return cur;
}

}  // namespace

TEST(Vocab, BijectiveWith128Tokens) {
  const auto& v = Vocab::standard();
  EXPECT_EQ(v.size(), 128u);
  for (int i = 0; i < 128; ++i) EXPECT_EQ(v.id(v.token(i)), i);
  EXPECT_EQ(v.token(Vocab::kAnswerEnd), "</answer>");
  EXPECT_EQ(v.encode("<think> k03 = v17 ;"),
            (std::vector<int>{Vocab::kThink, Vocab::key(3), Vocab::kEquals, Vocab::value(17),
                              Vocab::kSemicolon}));
  EXPECT_THROW(v.id("nope"), IndexError);
}

TEST(Niah, NoDistractorsHasSinglePair) {
  auto inst = gen_niah(3, 64, 0);
  EXPECT_EQ(std::count(inst.context.begin(), inst.context.end(), Vocab::kEquals), 1);
  EXPECT_EQ(inst.context.size(), 64u);
}

TEST(Niah, DeterministicPerSeed) {
  EXPECT_EQ(gen_niah(11, 256, 6), gen_niah(11, 256, 6));
  EXPECT_NE(gen_niah(11, 256, 6).context, gen_niah(12, 256, 6).context);
}

TEST(Niah, InfeasibleLengthIsConfigError) {
  EXPECT_THROW(gen_niah(0, 10, 3), ConfigError);
  EXPECT_THROW(gen_niah(0, 512, 40), ConfigError);
}

TEST(Niah, ThousandInstancesMatchTextScan) {
  const auto& v = Vocab::standard();
  for (std::uint64_t s = 0; s < 1000; ++s) {
    auto inst = gen_niah(s, 256, 6);
    ASSERT_EQ(inst.context.size(), 256u);
    const std::string key = v.token(inst.question[1]);
    ASSERT_EQ(scan_needle(v.decode(inst.context), key), inst.answer) << "seed " << s;
  }
}

TEST(CommonWords, SingleWordIsTheAnswer) {
  auto inst = gen_common_words(5, 256, 1);
  const int answer = Vocab::standard().id(inst.answer);
  const auto planted = std::count(inst.context.begin(), inst.context.end(), answer);
  // planted at least ten times the mean filler frequency, and strictly most frequent
  EXPECT_GE(planted * (Vocab::kFillerCount - 1), 10 * (256 - planted));
  for (int w = Vocab::kFillerBase; w < Vocab::kSize; ++w) {
    if (w == answer) continue;
    EXPECT_LT(std::count(inst.context.begin(), inst.context.end(), w), planted);
  }
}

TEST(CommonWords, DeterministicPerSeed) {
  EXPECT_EQ(gen_common_words(9, 256, 3), gen_common_words(9, 256, 3));
}

TEST(CommonWords, ThousandInstancesMatchCountingOracle) {
  const auto& v = Vocab::standard();
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const std::size_t n = 1 + s % 3;
    auto inst = gen_common_words(s, 256, n);
    ASSERT_EQ(inst.context.size(), 256u);
    ASSERT_EQ(count_most_common(v.decode(inst.context), n), inst.answer) << "seed " << s;
  }
}

TEST(VarTracking, ChainOfOneIsDirectLookup) {
  auto inst = gen_var_tracking(2, 64, 1);
  const auto& v = Vocab::standard();
  EXPECT_EQ(scan_needle(v.decode(inst.context), v.token(inst.question[1])), inst.answer);
}

TEST(VarTracking, DeterministicPerSeed) {
  EXPECT_EQ(gen_var_tracking(4, 256, 3), gen_var_tracking(4, 256, 3));
  EXPECT_THROW(gen_var_tracking(4, 256, 0), ConfigError);
}

TEST(VarTracking, ThousandInstancesMatchPointerChase) {
  const auto& v = Vocab::standard();
  for (std::uint64_t s = 0; s < 1000; ++s) {
    auto inst = gen_var_tracking(s, 256, 1 + s % 5);
    ASSERT_EQ(chase_pointer(v.decode(inst.context), v.token(inst.question[1])), inst.answer)
        << "seed " << s;
  }
}

TEST(Splits, DisjointRangesNeverCollide) {
  SplitSeeds seeds{{0, 300}, {1000, 300}, {5000, 100}};
  TaskMix mix{0.4, 0.3, 0.3};
  auto d = make_splits(seeds, mix, TaskConfig{});
  std::set<std::vector<int>> sft;
  for (const auto& i : d.sft) sft.insert(i.prompt());
  for (const auto& i : d.eval) EXPECT_FALSE(sft.count(i.prompt()));
  for (const auto& i : d.rl) EXPECT_FALSE(sft.count(i.prompt()));
  std::set<TaskKind> kinds;
  for (const auto& i : d.sft) kinds.insert(i.kind);
  EXPECT_EQ(kinds.size(), 3u);
}

TEST(Splits, OverlappingRangesRejected) {
  SplitSeeds seeds{{0, 100}, {50, 100}, {500, 10}};
  EXPECT_THROW(make_splits(seeds, TaskMix{}, TaskConfig{}), ConfigError);
  EXPECT_THROW(make_splits(SplitSeeds{}, TaskMix{0.5, 0.6, 0.0}, TaskConfig{}), ConfigError);
}

TEST(Splits, PureNiahMix) {
  SplitSeeds seeds{{0, 50}, {100, 50}, {200, 50}};
  auto d = make_splits(seeds, TaskMix{1, 0, 0}, TaskConfig{});
  for (const auto* split : {&d.sft, &d.rl, &d.eval}) {
    for (const auto& i : *split) EXPECT_EQ(i.kind, TaskKind::niah);
  }
}

TEST(DatasetFile, RoundTripsWithStableFieldOrder) {
  SplitSeeds seeds{{0, 20}, {100, 5}, {200, 5}};
  auto d = make_splits(seeds, TaskMix{0.5, 0.25, 0.25}, TaskConfig{});
  auto path = std::filesystem::temp_directory_path() / "longact_tasks.jsonl";
  write_dataset(d.sft, path, true);
  std::ifstream is(path);
  std::string first;
  std::getline(is, first);
  EXPECT_EQ(first.rfind("{\"kind\":", 0), 0u);
  EXPECT_LT(first.find("\"seed\""), first.find("\"context\""));
  EXPECT_LT(first.find("\"question\""), first.find("\"answer\""));
  EXPECT_NE(first.find("\"response\""), std::string::npos);
  EXPECT_EQ(read_dataset(path), d.sft);
  std::filesystem::remove(path);
}

TEST(DatasetFile, MalformedLineIsIoError) {
  auto path = std::filesystem::temp_directory_path() / "longact_bad.jsonl";
  {
    std::ofstream os(path);
    os << "{\"kind\": \"niah\"}\n";
  }
  EXPECT_THROW(read_dataset(path), IoError);
  std::filesystem::remove(path);
}
