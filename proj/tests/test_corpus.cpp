#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "protestlens/corpus.hpp"
#include "synthetic.hpp"

using namespace protestlens;

namespace {

void write_file(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  out << body;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

std::string article_line(std::int64_t id, const std::string& title, int year,
                         const std::string& text, const std::string& category) {
  nlohmann::json j = {{"id", id},
                      {"title", title},
                      {"year", year},
                      {"text", text},
                      {"category", category}};
  return j.dump() + "\n";
}

/// Twelve eligible articles across the sampled categories, three of which
/// are claimed by events, plus the pathological records the matcher and
/// filter have to survive.
struct Fixture {
  synthetic::TmpDir tmp;
  std::string events_path;
  std::string articles_path;

  Fixture() {
    events_path = tmp.file("events.csv");
    articles_path = tmp.file("articles.jsonl");

    std::string articles;
    articles += article_line(1, "March Downtown Tonight", 1970,
                             "demonstrators filled the square with banners", "news");
    articles += article_line(2, "Garden Fair Opens", 1970, "roses and tulips", "leisure");
    articles += article_line(3, "Team Wins Cup", 1971, "three goals in the final", "Sports");
    articles += article_line(4, "Stocks Rally Again", 1971, "markets closed higher", "finance");
    articles += article_line(5, "Mayor Speech Criticized", 1972, "council reaction", "politics");
    articles += article_line(6, "Strike At The Plant", 1972,
                             "workers walked out and formed a picket line", "news");
    articles += article_line(7, "Old Bridge Closes", 1973, "detour via elm street", "classified");
    articles += article_line(8, "Concert Night", 1973, "the orchestra returns", "entertainment");
    articles += article_line(9, "Team Wins The Cup", 1971,
                             "fans marched in celebration downtown", "Sports");
    articles += article_line(10, "Quarterly Earnings Up", 1974, "profits rose", "business");
    articles += article_line(11, "A Long Novel Reviewed", 1974, "the prose meanders", "book reviews");
    articles += article_line(12, "Homes For Sale Uptown", 1975, "three bedrooms", "real estate");
    articles += article_line(13, "Remembering A Teacher", 1975, "beloved by students", "obituary");
    articles += article_line(14, "Season Opener Recap", 1976, "a slow first half", "sports");
    articles += article_line(15, "Rally In The Park", 1974, "two groups gathered", "news");
    articles += article_line(16, "City Hall Sit In", 1975, "a brief occupation", "news");
    write_file(articles_path, articles);

    write_file(events_path,
               "event_id,article_title,year,events_in_article\n"
               "11,March Downtown Tonight,1970,1\n"
               "12,Strike At The Plamt,1972,1\n"
               "13,Unmatched Event Title,1970,1\n"
               "14,Rally In The Park,1974,2\n"
               "15,Team Wins The Cup,1971,1\n"
               "21,City Hall Sit In,1975,1\n"
               "22,City Hall Sit In,1975,1\n"
               "30,No Such Article,1959,1\n");
  }

  CorpusBuildConfig config() const {
    CorpusBuildConfig cfg;
    cfg.events_path = events_path;
    cfg.articles_path = articles_path;
    cfg.out_dir = tmp.path();
    cfg.negatives = 9;
    cfg.ratios = {0.34, 0.33, 0.33};
    cfg.seed = 7;
    return cfg;
  }
};

}  // namespace

TEST_CASE("title normalization lowercases, strips punctuation, collapses spaces") {
  CHECK(normalize_title("") == "");
  CHECK(normalize_title("  Protest at CITY Hall!! ") == "protest at city hall");
  CHECK(normalize_title("U.S.–China  talks") == "u s china talks");
  CHECK(normalize_title("“Quoted—Title”") == "quoted title");
  CHECK(normalize_title("ＡＢＣ") == "abc");
  CHECK(normalize_title("ﬁne print") == "fine print");
  CHECK(normalize_title("wait…") == "wait");
  CHECK(normalize_title("non breaking spaces") == "non breaking spaces");
  CHECK(normalize_title("already normal") == "already normal");
  CHECK(normalize_title("!!!") == "");
}

TEST_CASE("edit distance and similarity behave at the boundaries") {
  CHECK(levenshtein("kitten", "sitting") == 3);
  CHECK(levenshtein("same", "same") == 0);
  CHECK(levenshtein("", "abc") == 3);
  CHECK(levenshtein("abc", "") == 3);
  CHECK(title_similarity("", "") == doctest::Approx(1.0));
  CHECK(title_similarity("abcd", "abce") == doctest::Approx(0.75));
  CHECK(title_similarity("abcdefghij", "abcdefghix") == doctest::Approx(0.9));
  CHECK(title_similarity("x", "completely different") < 0.2);
}

TEST_CASE("exact matching keys on normalized title and year") {
  std::vector<ArticleRecord> articles = {
      {100, "The Big March!", 1980, "text", "news"},
      {101, "The Big March!", 1981, "text", "news"},
  };
  std::vector<EventRecord> events = {{1, "  the big MARCH ", 1980, 1}};
  MatchOutcome out = match_records(events, articles);
  REQUIRE(out.matches.size() == 1);
  CHECK(out.matches[0].article_id == 100);
  CHECK(out.matches[0].kind == MatchKind::exact);
  CHECK(out.matches[0].similarity == doctest::Approx(1.0));
  CHECK(out.matches[0].claim_count == 1);

  std::vector<EventRecord> wrong_year = {{1, "The Big March!", 1979, 1}};
  MatchOutcome none = match_records(wrong_year, articles);
  CHECK(none.matches.empty());
}

TEST_CASE("fuzzy matching takes the best same-year candidate above threshold") {
  std::vector<ArticleRecord> articles = {
      {299, "demonstration on mxin stryet", 1980, "t", "news"},  // two edits
      {300, "demonstration on mxin street", 1980, "t", "news"},  // one edit
      {301, "unrelated gardening column", 1980, "t", "leisure"},
  };
  std::vector<EventRecord> events = {{7, "demonstration on main street", 1980, 1}};
  MatchOutcome out = match_records(events, articles, 0.90);
  REQUIRE(out.matches.size() == 1);
  CHECK(out.matches[0].article_id == 300);
  CHECK(out.matches[0].kind == MatchKind::fuzzy);
  CHECK(out.matches[0].similarity == doctest::Approx(1.0 - 1.0 / 28.0));

  MatchOutcome strict = match_records(events, articles, 0.99);
  CHECK(strict.matches.empty());
}

TEST_CASE("fuzzy similarity ties resolve to the lower article id") {
  std::vector<ArticleRecord> articles = {
      {101, "abcdefghiy", 1980, "t", "news"},
      {100, "abcdefghix", 1980, "t", "news"},
  };
  std::vector<EventRecord> events = {{50, "abcdefghij", 1980, 1}};
  MatchOutcome out = match_records(events, articles, 0.90);
  REQUIRE(out.matches.size() == 1);
  CHECK(out.matches[0].article_id == 100);
  CHECK(out.matches[0].similarity == doctest::Approx(0.9));
}

TEST_CASE("duplicate title/year articles surface an ambiguity and keep the lower id") {
  std::vector<ArticleRecord> articles = {
      {202, "Same Headline", 1985, "t", "news"},
      {201, "Same Headline", 1985, "t", "news"},
  };
  std::vector<EventRecord> events = {{9, "Same Headline", 1985, 1}};
  MatchOutcome out = match_records(events, articles);
  REQUIRE(out.matches.size() == 1);
  CHECK(out.matches[0].article_id == 201);
  REQUIRE(out.ambiguities.size() == 1);
  CHECK(out.ambiguities[0].find("201") != std::string::npos);
  CHECK(out.ambiguities[0].find("202") != std::string::npos);
}

TEST_CASE("an article claimed by several events goes to the lowest event id") {
  std::vector<ArticleRecord> articles = {{500, "Shared Story", 1990, "t", "news"}};
  std::vector<EventRecord> events = {
      {10, "Shared Story", 1990, 1},
      {4, "Shared Story", 1990, 1},
      {8, "Shared Story", 1990, 1},
  };
  MatchOutcome out = match_records(events, articles);
  REQUIRE(out.matches.size() == 1);
  CHECK(out.matches[0].event_id == 4);
  CHECK(out.matches[0].claim_count == 3);

  std::vector<DropLogEntry> drops;
  std::vector<Match> kept = filter_multi_event(out.matches, events, &drops);
  CHECK(kept.empty());
  REQUIRE(drops.size() == 1);
  CHECK(drops[0].reason.find("claimed by 3") != std::string::npos);
}

TEST_CASE("multi-event articles are filtered out with a logged reason") {
  std::vector<ArticleRecord> articles = {
      {600, "Solo Event Story", 1990, "t", "news"},
      {601, "Busy Day Story", 1990, "t", "news"},
  };
  std::vector<EventRecord> events = {
      {1, "Solo Event Story", 1990, 1},
      {2, "Busy Day Story", 1990, 3},
  };
  MatchOutcome out = match_records(events, articles);
  REQUIRE(out.matches.size() == 2);
  std::vector<DropLogEntry> drops;
  std::vector<Match> kept = filter_multi_event(out.matches, events, &drops);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].article_id == 600);
  REQUIRE(drops.size() == 1);
  CHECK(drops[0].event_id == 2);
  CHECK(drops[0].reason == "events_in_article=3");

  std::vector<Match> orphan = {{99, 600, MatchKind::exact, 1.0, 1}};
  CHECK_THROWS_AS(filter_multi_event(orphan, events, nullptr), DataError);
}

TEST_CASE("negative sampling draws only from the allowlisted categories") {
  std::vector<ArticleRecord> archive;
  for (int i = 0; i < 6; ++i) archive.push_back({i + 1, "s", 1970, "t", "sports"});
  for (int i = 0; i < 3; ++i) archive.push_back({i + 10, "b", 1970, "t", "Business"});
  archive.push_back({20, "f", 1970, "t", "  finance "});
  archive.push_back({30, "p", 1970, "t", "politics"});
  archive.push_back({31, "n", 1970, "t", "news"});

  std::vector<ArticleRecord> got = sample_negatives(archive, 5, 7);
  REQUIRE(got.size() == 5);
  std::map<std::string, int> by_cat;
  for (const ArticleRecord& a : got) {
    by_cat[normalize_category(a.category)] += 1;
    CHECK(a.article_id < 25);  // never the politics/news rows
  }
  // shares: sports 3.0, business 1.5, finance 0.5 -> floors 3/1/0, the
  // leftover unit goes to the alphabetically earlier of the tied remainders
  CHECK(by_cat["sports"] == 3);
  CHECK(by_cat["business"] == 2);
  CHECK(by_cat["finance"] == 0);
}

TEST_CASE("negative sampling is deterministic and bounded by the pool") {
  std::vector<ArticleRecord> archive;
  for (int i = 0; i < 40; ++i) {
    const char* cat = (i % 3 == 0) ? "sports" : (i % 3 == 1) ? "leisure" : "obituary";
    archive.push_back({i + 1, "t", 1970, "t", cat});
  }
  std::vector<ArticleRecord> a = sample_negatives(archive, 12, 123);
  std::vector<ArticleRecord> b = sample_negatives(archive, 12, 123);
  REQUIRE(a.size() == 12);
  REQUIRE(b.size() == 12);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].article_id == b[i].article_id);
  }
  for (std::size_t i = 1; i < a.size(); ++i) {
    CHECK(a[i - 1].article_id < a[i].article_id);
  }

  std::vector<ArticleRecord> all = sample_negatives(archive, 500, 123);
  CHECK(all.size() == 40);

  CHECK_THROWS_AS(sample_negatives(archive, 0, 1), ValueError);

  std::vector<ArticleRecord> none = {{1, "t", 1970, "t", "politics"}};
  std::vector<std::string> warnings;
  CHECK(sample_negatives(none, 5, 1, &warnings).empty());
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("no articles") != std::string::npos);
}

TEST_CASE("the category allowlist is exactly the nine section names") {
  const std::vector<std::string> expect = {
      "book reviews", "business", "classified", "entertainment", "finance",
      "leisure", "obituary", "real estate", "sports"};
  CHECK(negative_category_allowlist() == expect);
}

TEST_CASE("stratified splitting hits the ratio targets exactly on round counts") {
  std::vector<LabeledExample> examples;
  for (int i = 0; i < 100; ++i) {
    examples.push_back({i + 1, "text", i < 50 ? 1 : 0, "s"});
  }
  std::vector<Split> assign = split_dataset(examples, SplitRatios{}, 7);
  std::map<Split, int> total;
  std::map<Split, int> positives;
  for (std::size_t i = 0; i < assign.size(); ++i) {
    total[assign[i]] += 1;
    if (examples[i].label == 1) positives[assign[i]] += 1;
  }
  CHECK(total[Split::train] == 80);
  CHECK(total[Split::val] == 10);
  CHECK(total[Split::test] == 10);
  CHECK(positives[Split::train] == 40);
  CHECK(positives[Split::val] == 5);
  CHECK(positives[Split::test] == 5);

  std::vector<Split> again = split_dataset(examples, SplitRatios{}, 7);
  CHECK(assign == again);
}

TEST_CASE("degenerate ratios and starved splits are rejected") {
  CHECK_THROWS_AS((SplitRatios{1.0, 0.0, 0.0}.validate()), ValueError);
  CHECK_THROWS_AS((SplitRatios{0.5, 0.3, 0.3}.validate()), ValueError);
  CHECK_THROWS_AS((SplitRatios{0.8, 0.15, -0.05}.validate()), ValueError);

  std::vector<LabeledExample> tiny;
  for (int i = 0; i < 10; ++i) tiny.push_back({i + 1, "t", i % 2, "s"});
  CHECK_THROWS_AS(split_dataset(tiny, SplitRatios{}, 1), DataError);
}

TEST_CASE("events csv loader validates its schema") {
  synthetic::TmpDir tmp;

  const std::string missing_col = tmp.file("a.csv");
  write_file(missing_col, "event_id,article_title,year\n1,t,1970\n");
  CHECK_THROWS_AS(load_events_csv(missing_col), DataError);

  const std::string bad_number = tmp.file("b.csv");
  write_file(bad_number,
             "event_id,article_title,year,events_in_article\nx,t,1970,1\n");
  CHECK_THROWS_AS(load_events_csv(bad_number), DataError);

  const std::string zero_count = tmp.file("c.csv");
  write_file(zero_count,
             "event_id,article_title,year,events_in_article\n1,t,1970,0\n");
  CHECK_THROWS_AS(load_events_csv(zero_count), DataError);

  const std::string odd_year = tmp.file("d.csv");
  write_file(odd_year,
             "event_id,article_title,year,events_in_article\n1,t,1959,1\n");
  std::vector<std::string> warnings;
  std::vector<EventRecord> evs = load_events_csv(odd_year, &warnings);
  REQUIRE(evs.size() == 1);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("outside 1960-1995") != std::string::npos);

  const std::string quoted = tmp.file("e.csv");
  write_file(quoted,
             "event_id,article_title,year,events_in_article\n"
             "5,\"March, Then Rally\",1970,1\n");
  std::vector<EventRecord> q = load_events_csv(quoted);
  REQUIRE(q.size() == 1);
  CHECK(q[0].article_title == "March, Then Rally");
}

TEST_CASE("articles jsonl loader validates each record") {
  synthetic::TmpDir tmp;

  const std::string bad_json = tmp.file("a.jsonl");
  write_file(bad_json, "{\"id\": 1,\n");
  CHECK_THROWS_AS(load_articles_jsonl(bad_json), DataError);

  const std::string missing_field = tmp.file("b.jsonl");
  write_file(missing_field, "{\"id\": 1, \"title\": \"t\", \"year\": 1970}\n");
  CHECK_THROWS_AS(load_articles_jsonl(missing_field), DataError);

  const std::string fine = tmp.file("c.jsonl");
  write_file(fine, article_line(3, "A Title", 1971, "body", "news") + "\n" +
                       article_line(4, "B Title", 1972, "body", "sports"));
  std::vector<ArticleRecord> arts = load_articles_jsonl(fine);
  REQUIRE(arts.size() == 2);
  CHECK(arts[1].category == "sports");
}

TEST_CASE("corpus build matches, filters, samples, and splits end to end") {
  Fixture fx;
  CorpusBuildResult result = build_corpus(fx.config());

  const nlohmann::json& counts = result.manifest.at("counts");
  CHECK(counts.at("events") == 8);
  CHECK(counts.at("articles") == 16);
  CHECK(counts.at("matches") == 5);
  CHECK(counts.at("matches_exact") == 4);
  CHECK(counts.at("matches_fuzzy") == 1);
  CHECK(counts.at("drops") == 2);
  CHECK(counts.at("positives") == 3);
  CHECK(counts.at("negatives_requested") == 9);
  CHECK(counts.at("negatives_sampled") == 9);

  REQUIRE(result.examples.size() == 12);
  std::set<std::int64_t> positive_ids;
  std::set<std::int64_t> negative_ids;
  for (const LabeledExample& ex : result.examples) {
    if (ex.label == 1) {
      positive_ids.insert(ex.id);
      CHECK(ex.source == "matched-positive");
    } else {
      negative_ids.insert(ex.id);
      CHECK(ex.source == "sampled-negative");
    }
  }
  CHECK(positive_ids == std::set<std::int64_t>{1, 6, 9});
  // article 9 is in an allowlisted category but was matched, so it must
  // never reappear on the negative side
  for (std::int64_t id : positive_ids) CHECK(negative_ids.count(id) == 0);
  for (std::int64_t id : {5, 15, 16}) CHECK(negative_ids.count(id) == 0);

  const nlohmann::json& drop_log = result.manifest.at("drop_log");
  REQUIRE(drop_log.size() == 2);
  CHECK(result.manifest.at("warnings").size() >= 1);

  std::map<Split, int> split_sizes;
  for (Split s : result.assignment) split_sizes[s] += 1;
  CHECK(split_sizes[Split::train] == 4);
  CHECK(split_sizes[Split::val] == 4);
  CHECK(split_sizes[Split::test] == 4);
}

TEST_CASE("two seeded corpus builds write byte-identical outputs") {
  Fixture fx;
  synthetic::TmpDir out_a;
  synthetic::TmpDir out_b;

  CorpusBuildConfig cfg = fx.config();
  cfg.out_dir = out_a.path();
  write_corpus(build_corpus(cfg), out_a.path());
  cfg.out_dir = out_b.path();
  write_corpus(build_corpus(cfg), out_b.path());

  for (const char* name :
       {"corpus.train.jsonl", "corpus.val.jsonl", "corpus.test.jsonl", "manifest.json"}) {
    const std::string a = read_file(out_a.path() + "/" + name);
    const std::string b = read_file(out_b.path() + "/" + name);
    CHECK(a == b);
    CHECK(!a.empty());
  }
}

TEST_CASE("written corpus files round-trip through the jsonl loader") {
  Fixture fx;
  synthetic::TmpDir out;
  CorpusBuildConfig cfg = fx.config();
  cfg.out_dir = out.path();
  CorpusBuildResult result = build_corpus(cfg);
  write_corpus(result, out.path());

  std::size_t total = 0;
  for (int s = 0; s < 3; ++s) {
    const std::string path = out.path() + "/corpus." +
                             split_name(static_cast<Split>(s)) + ".jsonl";
    std::vector<LabeledExample> loaded = load_corpus_jsonl(path);
    total += loaded.size();
    for (const LabeledExample& ex : loaded) {
      auto it = std::find_if(result.examples.begin(), result.examples.end(),
                             [&](const LabeledExample& e) { return e.id == ex.id; });
      REQUIRE(it != result.examples.end());
      CHECK(it->label == ex.label);
      CHECK(it->text == ex.text);
      CHECK(it->source == ex.source);
    }
  }
  CHECK(total == result.examples.size());

  const std::string bad_label = out.path() + "/bad.jsonl";
  write_file(bad_label, "{\"id\": 1, \"text\": \"t\", \"label\": 2}\n");
  CHECK_THROWS_AS(load_corpus_jsonl(bad_label), DataError);
}

TEST_CASE("a matched article with empty text stops the build") {
  synthetic::TmpDir tmp;
  const std::string events = tmp.file("events.csv");
  const std::string articles = tmp.file("articles.jsonl");
  write_file(events,
             "event_id,article_title,year,events_in_article\n1,Empty Story,1970,1\n");
  write_file(articles, article_line(1, "Empty Story", 1970, "", "news"));

  CorpusBuildConfig cfg;
  cfg.events_path = events;
  cfg.articles_path = articles;
  cfg.out_dir = tmp.path();
  CHECK_THROWS_AS(build_corpus(cfg), DataError);
}
