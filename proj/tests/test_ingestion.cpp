#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <set>
#include <sstream>

#include "drfo/errors.hpp"
#include "drfo/ingestion.hpp"
#include "support.hpp"

using namespace drfo;

namespace {

RatingTable table_of(std::vector<RatingRow> rows, std::size_t n_users, std::size_t n_items) {
  RatingTable t;
  t.rows = std::move(rows);
  for (std::size_t u = 0; u < n_users; ++u) {
    t.user_ids.push_back(static_cast<std::int64_t>(u + 1));
    t.user_attr.push_back(static_cast<std::int8_t>(u % 2));
  }
  for (std::size_t v = 0; v < n_items; ++v) t.item_ids.push_back(static_cast<std::int64_t>(v + 1));
  return t;
}

RatingTable binary_table(std::size_t n_rows, std::size_t n_users = 10, std::size_t n_items = 10) {
  std::vector<RatingRow> rows;
  for (std::size_t i = 0; i < n_rows; ++i) {
    rows.push_back({static_cast<UserId>(i % n_users), static_cast<ItemId>((i / n_users) % n_items),
                    static_cast<int>(i % 3 == 0)});
  }
  return table_of(std::move(rows), n_users, n_items);
}

}  // namespace

TEST_CASE("movielens lines map field by field") {
  std::istringstream ratings("1::1193::5::978300760\n");
  std::istringstream users("1::F::1::10::48067\n");
  const auto t = parse_movielens(ratings, users);
  REQUIRE(t.rows.size() == 1);
  CHECK(t.rows[0].rating == 5);
  CHECK(t.user_ids == std::vector<std::int64_t>{1});
  CHECK(t.item_ids == std::vector<std::int64_t>{1193});
  CHECK(t.user_attr == std::vector<std::int8_t>{1});
}

TEST_CASE("empty ratings give an empty table") {
  std::istringstream ratings("");
  std::istringstream users("1::M::1::10::48067\n");
  const auto t = parse_movielens(ratings, users);
  CHECK(t.rows.empty());
  CHECK(t.n_users() == 0);
}

TEST_CASE("raw ratings are kept until binarization") {
  std::istringstream ratings("7::9::3::0\n");
  std::istringstream users("7::M::1::1::1\n");
  const auto t = parse_movielens(ratings, users);
  CHECK(t.rows.at(0).rating == 3);
  CHECK(t.user_attr.at(0) == 0);
}

TEST_CASE("malformed movielens input is rejected") {
  std::istringstream users("1::F::1::10::1\n");
  std::istringstream bad_field("1::x::5::0\n");
  CHECK_THROWS_AS(parse_movielens(bad_field, users), ParseError);
  std::istringstream users2("1::F::1::10::1\n");
  std::istringstream short_line("1::2::5\n");
  CHECK_THROWS_AS(parse_movielens(short_line, users2), ParseError);
  std::istringstream users3("1::F::1::10::1\n");
  std::istringstream unknown_user("2::2::5::0\n");
  CHECK_THROWS_AS(parse_movielens(unknown_user, users3), IntegrityError);
  std::istringstream users4("1::X::1::10::1\n");
  std::istringstream fine("1::2::5::0\n");
  CHECK_THROWS_AS(parse_movielens(fine, users4), ParseError);
  CHECK_THROWS_AS(parse_movielens("/nonexistent/ratings.dat", "/nonexistent/users.dat"), IoError);
}

TEST_CASE("binarization is strictly greater than the threshold") {
  const auto t = binarize(table_of({{0, 0, 4}, {0, 0, 3}, {0, 0, 1}}, 1, 1), 3);
  CHECK(t.rows[0].rating == 1);
  CHECK(t.rows[1].rating == 0);
  CHECK(t.rows[2].rating == 0);
}

TEST_CASE("k-core filtering cascades to a fixpoint") {
  // users 0..4, items 0..3; user 2 has two interactions and falls first,
  // which drops item 3 below item_k, which then drops user 1.
  const std::vector<std::vector<ItemId>> hist = {{0, 1, 2}, {0, 1, 3}, {0, 3}, {0, 1, 2}, {0, 1, 2}};
  std::vector<RatingRow> rows;
  for (UserId u = 0; u < hist.size(); ++u) {
    for (ItemId v : hist[u]) rows.push_back({u, v, 1});
  }
  const auto out = k_core_filter(table_of(rows, 5, 4), 3, 2);
  CHECK(out.user_ids == std::vector<std::int64_t>{1, 4, 5});
  CHECK(out.item_ids == std::vector<std::int64_t>{1, 2, 3});
  CHECK(out.rows.size() == 9);
  CHECK(out.user_attr == std::vector<std::int8_t>{0, 1, 0});
}

TEST_CASE("1-core keeps everything and an over-strict core is an error") {
  const auto t = binary_table(40, 5, 8);
  const auto same = k_core_filter(t, 1, 1);
  CHECK(same.rows.size() == t.rows.size());
  CHECK(same.user_ids == t.user_ids);
  CHECK_THROWS_AS(k_core_filter(t, 1000, 1), EmptyResultError);
  CHECK_THROWS_AS(k_core_filter(t, 0, 1), UsageError);
}

TEST_CASE("split sizes use largest remainder with ties to the earlier partition") {
  CHECK(split_sizes(100, {}) == std::array<std::size_t, 3>{70, 15, 15});
  CHECK(split_sizes(10, {}) == std::array<std::size_t, 3>{7, 2, 1});
  CHECK(split_sizes(0, {}) == std::array<std::size_t, 3>{0, 0, 0});
  // Every n: sizes add up and no partition is off by more than one record.
  for (std::size_t n = 1; n < 300; ++n) {
    const auto s = split_sizes(n, {});
    CHECK(s[0] + s[1] + s[2] == n);
    CHECK(std::abs(static_cast<double>(s[0]) - 0.7 * static_cast<double>(n)) < 1.0);
    CHECK(std::abs(static_cast<double>(s[1]) - 0.15 * static_cast<double>(n)) < 1.0);
  }
  CHECK_THROWS_AS(split_sizes(10, {0.5, 0.5, 0.5}), UsageError);
}

TEST_CASE("split is a deterministic partition of the records") {
  const auto t = binary_table(100);
  const auto a = split(t, {}, 42);
  const auto b = split(t, {}, 42);
  CHECK(a.train.size() == 70);
  CHECK(a.validation.size() == 15);
  CHECK(a.test.size() == 15);
  CHECK(std::equal(a.train.records().begin(), a.train.records().end(), b.train.records().begin()));
  CHECK(std::equal(a.test.records().begin(), a.test.records().end(), b.test.records().begin()));
  std::multiset<std::pair<UserId, ItemId>> all;
  for (const auto* part : {&a.train, &a.validation, &a.test}) {
    for (const auto& r : part->records()) all.insert({r.user, r.item});
  }
  std::multiset<std::pair<UserId, ItemId>> expected;
  for (const auto& r : t.rows) expected.insert({r.user, r.item});
  CHECK(all == expected);
  const auto c = split(t, {}, 43);
  CHECK_FALSE(std::equal(a.train.records().begin(), a.train.records().end(), c.train.records().begin()));
}

TEST_CASE("mask plans") {
  auto t = testing::small_table(1000, 5);
  const auto s = split(t, {}, 1);

  SUBCASE("full retention keeps every attribute") {
    const auto m = apply_mask_plan(s, {1.0, 0.0, 3});
    for (const auto& st : m.user_status) CHECK(st.is_known());
    CHECK(m.train.index(Partition::Known).size() == m.train.size());
  }
  SUBCASE("zero retention with full forbid makes everyone forbidden") {
    const auto m = apply_mask_plan(s, {0.0, 1.0, 3});
    for (const auto& st : m.user_status) CHECK(st.state == AttrState::MissingForbidden);
    CHECK(m.train.index(Partition::Forbidden).size() == m.train.size());
    CHECK(m.validation.index(Partition::Forbidden).size() == m.validation.size());
    CHECK(m.test.index(Partition::Known).size() == m.test.size());
  }
  SUBCASE("retention 0.3 keeps exactly 300 of 1000 users, consistently per user") {
    REQUIRE(s.n_users() == 1000);
    const auto m = apply_mask_plan(s, {0.3, 0.0, 3});
    std::size_t known = 0;
    for (const auto& st : m.user_status) known += st.is_known();
    CHECK(known == 300);
    for (const auto* part : {&m.train, &m.validation}) {
      for (const auto& r : part->records()) {
        CHECK(r.status == m.user_status[r.user]);
        if (r.status.is_known()) CHECK(r.status.s == m.true_attr[r.user]);
      }
    }
    const auto again = apply_mask_plan(s, {0.3, 0.0, 3});
    CHECK(again.user_status == m.user_status);
  }
  SUBCASE("forbid fraction applies to the masked users") {
    const auto m = apply_mask_plan(s, {0.3, 0.5, 3});
    std::size_t forbidden = 0;
    for (const auto& st : m.user_status) forbidden += st.state == AttrState::MissingForbidden;
    CHECK(forbidden == 350);
  }
  CHECK_THROWS_AS(apply_mask_plan(s, {1.5, 0.0, 3}), ConfigError);
}

TEST_CASE("synthetic data is reproducible and fit for the pipeline") {
  const auto cfg = SyntheticConfig::movielens_like(200, 9);
  const auto a = generate_synthetic(cfg);
  const auto b = generate_synthetic(cfg);
  REQUIRE(a.rows.size() == b.rows.size());
  CHECK(std::equal(a.rows.begin(), a.rows.end(), b.rows.begin(), [](const RatingRow& x, const RatingRow& y) {
    return x.user == y.user && x.item == y.item && x.rating == y.rating;
  }));
  CHECK(a.n_users() == 200);
  std::vector<std::size_t> per_user(a.n_users(), 0);
  std::array<double, 2> pos{}, cnt{};
  for (const auto& r : a.rows) {
    CHECK((r.rating == 0 || r.rating == 1));
    ++per_user[r.user];
    pos[a.user_attr[r.user]] += r.rating;
    cnt[a.user_attr[r.user]] += 1;
  }
  CHECK(*std::min_element(per_user.begin(), per_user.end()) >= cfg.min_interactions);
  CHECK(std::count(a.user_attr.begin(), a.user_attr.end(), 0) > 0);
  CHECK(std::count(a.user_attr.begin(), a.user_attr.end(), 1) > 0);
  for (int s = 0; s < 2; ++s) CHECK(pos[s] / cnt[s] == doctest::Approx(cfg.target_mean_rating[s]).epsilon(0.1));
}

TEST_CASE("canonical split files round-trip") {
  const auto t = testing::small_table(60, 2);
  const auto m = apply_mask_plan(split(t, {}, 4), {0.4, 0.5, 8});
  const auto dir = std::filesystem::temp_directory_path() / "drfo_test_canonical";
  std::filesystem::remove_all(dir);
  write_split_dataset(m, dir);
  const auto r = read_split_dataset(dir);
  CHECK(r.true_attr == m.true_attr);
  CHECK(r.user_status == m.user_status);
  CHECK(r.n_items() == m.n_items());
  for (auto [x, y] : {std::pair{&m.train, &r.train}, {&m.validation, &r.validation}, {&m.test, &r.test}}) {
    REQUIRE(x->size() == y->size());
    CHECK(std::equal(x->records().begin(), x->records().end(), y->records().begin()));
  }
  std::filesystem::remove_all(dir);
  CHECK_THROWS(read_split_dataset(dir));
}
