#include "drfo/ingestion.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>

#include "drfo/errors.hpp"
#include "drfo/random.hpp"

namespace drfo {

namespace {

std::vector<std::string_view> split_fields(std::string_view line, std::string_view delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + delim.size();
  }
}

std::int64_t parse_int(std::string_view field, const char* what, std::size_t line_no) {
  std::int64_t value = 0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw ParseError("line " + std::to_string(line_no) + ": invalid " + what + " '" +
                     std::string(field) + "'");
  }
  return value;
}

std::string_view trim_cr(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
  return s;
}

}  // namespace

RatingTable parse_movielens(std::istream& ratings, std::istream& users) {
  std::map<std::int64_t, std::int8_t> gender;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(users, line)) {
    ++line_no;
    auto view = trim_cr(line);
    if (view.empty()) continue;
    auto f = split_fields(view, "::");
    if (f.size() < 2) throw ParseError("users line " + std::to_string(line_no) + ": expected UserID::Gender::...");
    auto id = parse_int(f[0], "user id", line_no);
    std::int8_t s;
    if (f[1] == "M") {
      s = 0;
    } else if (f[1] == "F") {
      s = 1;
    } else {
      throw ParseError("users line " + std::to_string(line_no) + ": unknown gender '" +
                       std::string(f[1]) + "'");
    }
    gender[id] = s;
  }

  struct RawRow {
    std::int64_t user, item;
    int rating;
  };
  std::vector<RawRow> raw;
  line_no = 0;
  while (std::getline(ratings, line)) {
    ++line_no;
    auto view = trim_cr(line);
    if (view.empty()) continue;
    auto f = split_fields(view, "::");
    if (f.size() != 4) {
      throw ParseError("ratings line " + std::to_string(line_no) +
                       ": expected UserID::MovieID::Rating::Timestamp");
    }
    RawRow r{parse_int(f[0], "user id", line_no), parse_int(f[1], "item id", line_no),
             static_cast<int>(parse_int(f[2], "rating", line_no))};
    parse_int(f[3], "timestamp", line_no);
    if (!gender.contains(r.user)) {
      throw IntegrityError("ratings line " + std::to_string(line_no) + ": user " +
                           std::to_string(r.user) + " missing from users file");
    }
    raw.push_back(r);
  }

  RatingTable table;
  std::map<std::int64_t, UserId> user_index;
  std::map<std::int64_t, ItemId> item_index;
  for (const auto& r : raw) {
    user_index.emplace(r.user, 0);
    item_index.emplace(r.item, 0);
  }
  for (auto& [id, dense] : user_index) {
    dense = static_cast<UserId>(table.user_ids.size());
    table.user_ids.push_back(id);
    table.user_attr.push_back(gender.at(id));
  }
  for (auto& [id, dense] : item_index) {
    dense = static_cast<ItemId>(table.item_ids.size());
    table.item_ids.push_back(id);
  }
  table.rows.reserve(raw.size());
  for (const auto& r : raw) {
    table.rows.push_back({user_index.at(r.user), item_index.at(r.item), r.rating});
  }
  return table;
}

RatingTable parse_movielens(const std::filesystem::path& ratings_path,
                            const std::filesystem::path& users_path) {
  std::ifstream ratings(ratings_path);
  if (!ratings) throw IoError("cannot open ratings file " + ratings_path.string());
  std::ifstream users(users_path);
  if (!users) throw IoError("cannot open users file " + users_path.string());
  return parse_movielens(ratings, users);
}

RatingTable binarize(const RatingTable& raw, int threshold) {
  RatingTable out = raw;
  for (auto& r : out.rows) r.rating = r.rating > threshold ? 1 : 0;
  return out;
}

RatingTable k_core_filter(const RatingTable& table, int user_k, int item_k) {
  if (user_k < 1 || item_k < 1) throw UsageError("k-core thresholds must be >= 1");
  std::vector<bool> alive(table.rows.size(), true);
  std::vector<bool> user_alive(table.n_users(), true), item_alive(table.n_items(), true);
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<std::size_t> user_deg(table.n_users(), 0), item_deg(table.n_items(), 0);
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
      if (!alive[i]) continue;
      ++user_deg[table.rows[i].user];
      ++item_deg[table.rows[i].item];
    }
    for (std::size_t u = 0; u < user_deg.size(); ++u) {
      if (user_alive[u] && user_deg[u] < static_cast<std::size_t>(user_k)) {
        user_alive[u] = false;
        changed = true;
      }
    }
    for (std::size_t v = 0; v < item_deg.size(); ++v) {
      if (item_alive[v] && item_deg[v] < static_cast<std::size_t>(item_k)) {
        item_alive[v] = false;
        changed = true;
      }
    }
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
      if (alive[i] && (!user_alive[table.rows[i].user] || !item_alive[table.rows[i].item])) {
        alive[i] = false;
      }
    }
  }

  RatingTable out;
  std::vector<UserId> user_map(table.n_users(), 0);
  std::vector<ItemId> item_map(table.n_items(), 0);
  for (std::size_t u = 0; u < table.n_users(); ++u) {
    if (!user_alive[u]) continue;
    user_map[u] = static_cast<UserId>(out.user_ids.size());
    out.user_ids.push_back(table.user_ids[u]);
    out.user_attr.push_back(table.user_attr[u]);
  }
  for (std::size_t v = 0; v < table.n_items(); ++v) {
    if (!item_alive[v]) continue;
    item_map[v] = static_cast<ItemId>(out.item_ids.size());
    out.item_ids.push_back(table.item_ids[v]);
  }
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    if (!alive[i]) continue;
    const auto& r = table.rows[i];
    out.rows.push_back({user_map[r.user], item_map[r.item], r.rating});
  }
  if (out.rows.empty()) {
    throw EmptyResultError("k-core filtering (user_k=" + std::to_string(user_k) +
                           ", item_k=" + std::to_string(item_k) + ") removed every interaction");
  }
  return out;
}

std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& ratios) {
  const std::array<double, 3> r = {ratios.train, ratios.validation, ratios.test};
  for (double x : r) {
    if (!(x > 0.0)) throw UsageError("split ratios must be positive");
  }
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) throw UsageError("split ratios must sum to 1");

  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double quota = r[k] * static_cast<double>(n);
    // Snap quotas that are integers up to rounding noise (0.7 * 10 etc.).
    const double snapped = std::round(quota);
    const double whole = std::abs(quota - snapped) < 1e-9 ? snapped : std::floor(quota);
    sizes[k] = static_cast<std::size_t>(whole);
    remainder[k] = std::abs(quota - snapped) < 1e-9 ? 0.0 : quota - whole;
    assigned += sizes[k];
  }
  std::array<int, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    // Remainders within 1e-9 count as tied; ties keep partition order.
    if (std::abs(remainder[a] - remainder[b]) < 1e-9) return false;
    return remainder[a] > remainder[b];
  });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++sizes[order[k % 3]];
  return sizes;
}

namespace {

PartitionedDataset make_partition(const RatingTable& table, const std::vector<std::size_t>& rows,
                                  std::size_t begin, std::size_t end) {
  std::vector<std::size_t> chosen(rows.begin() + static_cast<std::ptrdiff_t>(begin),
                                  rows.begin() + static_cast<std::ptrdiff_t>(end));
  std::sort(chosen.begin(), chosen.end());
  std::vector<InteractionRecord> records;
  records.reserve(chosen.size());
  for (auto i : chosen) {
    const auto& r = table.rows[i];
    if (r.rating != 0 && r.rating != 1) {
      throw UsageError("split() expects binarized ratings");
    }
    records.push_back({r.user, r.item, static_cast<std::uint8_t>(r.rating),
                       AttrStatus::known(table.user_attr[r.user])});
  }
  return PartitionedDataset(std::move(records), table.n_users(), table.n_items());
}

}  // namespace

SplitDataset split(const RatingTable& table, const SplitRatios& ratios, std::uint64_t seed) {
  auto sizes = split_sizes(table.rows.size(), ratios);
  std::vector<std::size_t> order(table.rows.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  shuffle_in_place(order, rng);

  SplitDataset out;
  out.train = make_partition(table, order, 0, sizes[0]);
  out.validation = make_partition(table, order, sizes[0], sizes[0] + sizes[1]);
  out.test = make_partition(table, order, sizes[0] + sizes[1], table.rows.size());
  out.true_attr = table.user_attr;
  out.user_status.reserve(table.n_users());
  for (auto s : table.user_attr) out.user_status.push_back(AttrStatus::known(s));
  return out;
}

void MaskPlan::validate() const {
  if (!(retention_ratio >= 0.0 && retention_ratio <= 1.0)) {
    throw ConfigError("retention_ratio must lie in [0,1]");
  }
  if (!(forbid_fraction >= 0.0 && forbid_fraction <= 1.0)) {
    throw ConfigError("forbid_fraction must lie in [0,1]");
  }
}

namespace {

PartitionedDataset restatus(const PartitionedDataset& ds, const std::vector<AttrStatus>& status) {
  std::vector<InteractionRecord> records(ds.records().begin(), ds.records().end());
  for (auto& r : records) r.status = status[r.user];
  return PartitionedDataset(std::move(records), ds.n_users(), ds.n_items());
}

}  // namespace

SplitDataset with_user_status(const SplitDataset& split, std::vector<AttrStatus> user_status) {
  if (user_status.size() != split.n_users()) throw UsageError("user status vector has the wrong size");
  SplitDataset out;
  out.train = restatus(split.train, user_status);
  out.validation = restatus(split.validation, user_status);
  out.test = split.test;
  out.true_attr = split.true_attr;
  out.user_status = std::move(user_status);
  return out;
}

SplitDataset apply_mask_plan(const SplitDataset& split, const MaskPlan& plan) {
  plan.validate();
  const std::size_t n = split.n_users();
  std::vector<UserId> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(plan.seed);
  shuffle_in_place(order, rng);

  const auto n_known = static_cast<std::size_t>(std::llround(plan.retention_ratio * static_cast<double>(n)));
  const std::size_t n_masked = n - n_known;
  const auto n_forbidden =
      static_cast<std::size_t>(std::llround(plan.forbid_fraction * static_cast<double>(n_masked)));

  std::vector<AttrStatus> status(n);
  for (std::size_t k = 0; k < n; ++k) {
    const UserId u = order[k];
    if (k < n_known) {
      status[u] = AttrStatus::known(split.true_attr[u]);
    } else if (k < n_known + n_forbidden) {
      status[u] = AttrStatus::forbidden();
    } else {
      status[u] = AttrStatus::reconstructable();
    }
  }
  return with_user_status(split, std::move(status));
}

SyntheticConfig SyntheticConfig::movielens_like(std::size_t n_users, std::uint64_t seed) {
  SyntheticConfig c;
  c.n_users = n_users;
  c.n_items = std::max<std::size_t>(200, n_users * 5 / 4);
  c.p_group1 = 3144.0 / (1153.0 + 3144.0);
  c.target_mean_rating = {0.5866, 0.5661};
  // Interaction volumes keep the 228,191 / 713,590 per-user ratio between groups.
  c.mean_extra_interactions = {40.0, 52.0};
  c.seed = seed;
  return c;
}

SyntheticConfig SyntheticConfig::tenrec_like(std::size_t n_users, std::uint64_t seed) {
  SyntheticConfig c;
  c.n_users = n_users;
  c.n_items = std::max<std::size_t>(200, n_users * 2);
  c.p_group1 = 2299.0 / (3108.0 + 2299.0);
  c.target_mean_rating = {0.4849, 0.4676};
  c.mean_extra_interactions = {49.0, 97.0};
  // Attribute inference is harder on this dataset.
  c.attr_choice_signal = 0.12;
  c.attr_rating_signal = 0.9;
  c.seed = seed;
  return c;
}

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

RatingTable generate_synthetic(const SyntheticConfig& c) {
  if (c.n_users == 0 || c.n_items == 0 || c.latent_dim == 0) {
    throw ConfigError("synthetic dataset dimensions must be positive");
  }
  if (c.min_interactions >= c.n_items) throw ConfigError("min_interactions must be below n_items");
  Rng rng(c.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  RatingTable table;
  const auto n1 = static_cast<std::size_t>(std::llround(c.p_group1 * static_cast<double>(c.n_users)));
  std::vector<std::int8_t> attr(c.n_users, 0);
  std::fill(attr.begin(), attr.begin() + static_cast<std::ptrdiff_t>(n1), 1);
  shuffle_in_place(attr, rng);
  table.user_attr = attr;
  table.user_ids.resize(c.n_users);
  std::iota(table.user_ids.begin(), table.user_ids.end(), 1);
  table.item_ids.resize(c.n_items);
  std::iota(table.item_ids.begin(), table.item_ids.end(), 1);

  const std::size_t d = c.latent_dim;
  const double factor_sd = c.latent_scale / std::sqrt(std::sqrt(static_cast<double>(d)));
  std::vector<double> item_log_pop(c.n_items), item_lean(c.n_items), item_bias(c.n_items);
  std::vector<double> item_factor(c.n_items * d), user_factor(c.n_users * d), user_bias(c.n_users);
  for (std::size_t v = 0; v < c.n_items; ++v) {
    item_log_pop[v] = c.popularity_skew * normal(rng);
    item_lean[v] = normal(rng);
    item_bias[v] = c.item_bias_scale * normal(rng);
    for (std::size_t k = 0; k < d; ++k) item_factor[v * d + k] = factor_sd * normal(rng);
  }
  for (std::size_t u = 0; u < c.n_users; ++u) {
    user_bias[u] = c.user_bias_scale * normal(rng);
    for (std::size_t k = 0; k < d; ++k) user_factor[u * d + k] = factor_sd * normal(rng);
  }

  // Item choice: Gumbel-top-k over log popularity + taste + group tilt.
  std::extreme_value_distribution<double> gumbel(0.0, 1.0);
  std::vector<double> score_base;  // latent part of the rating logit, per row
  std::vector<std::pair<double, ItemId>> keys(c.n_items);
  for (std::size_t u = 0; u < c.n_users; ++u) {
    const int s = attr[u];
    const double tilt = c.attr_choice_signal * (2.0 * s - 1.0);
    std::geometric_distribution<std::size_t> extra(1.0 / (1.0 + c.mean_extra_interactions[s]));
    const std::size_t count =
        std::min(c.n_items / 2, c.min_interactions + extra(rng));
    for (std::size_t v = 0; v < c.n_items; ++v) {
      double taste = 0.0;
      for (std::size_t k = 0; k < d; ++k) taste += user_factor[u * d + k] * item_factor[v * d + k];
      keys[v] = {item_log_pop[v] + c.choice_taste_weight * taste + tilt * item_lean[v] + gumbel(rng),
                 static_cast<ItemId>(v)};
    }
    std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(count), keys.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<ItemId> items;
    for (std::size_t k = 0; k < count; ++k) items.push_back(keys[k].second);
    std::sort(items.begin(), items.end());
    for (ItemId v : items) {
      double taste = 0.0;
      for (std::size_t k = 0; k < d; ++k) taste += user_factor[u * d + k] * item_factor[v * d + k];
      table.rows.push_back({static_cast<UserId>(u), v, 0});
      score_base.push_back(user_bias[u] + item_bias[v] + taste +
                           c.attr_rating_signal * (2.0 * s - 1.0) * item_lean[v]);
    }
  }

  // Per-group intercepts so that the expected positive rate of each group hits
  // its target; bisection on a monotone mean of logistics.
  std::array<double, 2> offset{};
  for (int s = 0; s < 2; ++s) {
    double lo = -20.0, hi = 20.0;
    std::size_t count = 0;
    for (const auto& r : table.rows) count += attr[r.user] == s;
    if (count == 0) continue;
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      double mean = 0.0;
      for (std::size_t i = 0; i < table.rows.size(); ++i) {
        if (attr[table.rows[i].user] == s) mean += logistic(score_base[i] + mid);
      }
      mean /= static_cast<double>(count);
      (mean < c.target_mean_rating[s] ? lo : hi) = mid;
    }
    offset[s] = 0.5 * (lo + hi);
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const double p = logistic(score_base[i] + offset[attr[table.rows[i].user]]);
    table.rows[i].rating = unit(rng) < p ? 1 : 0;
  }
  return table;
}

namespace {

std::string_view status_name(AttrState s) {
  switch (s) {
    case AttrState::Known: return "known";
    case AttrState::MissingReconstructable: return "missing";
    case AttrState::MissingForbidden: return "forbidden";
  }
  return "?";
}

AttrStatus parse_status(std::string_view name, std::string_view s_field, std::size_t line_no) {
  if (name == "known") {
    auto s = parse_int(s_field, "attribute", line_no);
    if (s != 0 && s != 1) throw ParseError("line " + std::to_string(line_no) + ": attribute must be 0 or 1");
    return AttrStatus::known(static_cast<int>(s));
  }
  if (name == "missing") return AttrStatus::reconstructable();
  if (name == "forbidden") return AttrStatus::forbidden();
  throw ParseError("line " + std::to_string(line_no) + ": unknown status '" + std::string(name) + "'");
}

constexpr std::string_view kRecordHeader = "user\titem\trating\tstatus\ts";
constexpr std::string_view kUserHeader = "user\ts\tstatus";

void write_partition(const PartitionedDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# drfo-dataset v1 users=" << ds.n_users() << " items=" << ds.n_items() << '\n';
  out << kRecordHeader << '\n';
  for (const auto& r : ds.records()) {
    out << r.user << '\t' << r.item << '\t' << int(r.rating) << '\t' << status_name(r.status.state)
        << '\t';
    if (r.status.is_known()) out << int(r.status.s);
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

PartitionedDataset read_partition(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t n_users = 0, n_items = 0, line_no = 1;
  if (!std::getline(in, line) ||
      std::sscanf(line.c_str(), "# drfo-dataset v1 users=%zu items=%zu", &n_users, &n_items) != 2) {
    throw ParseError(path.string() + ": missing '# drfo-dataset v1' preamble");
  }
  ++line_no;
  if (!std::getline(in, line) || trim_cr(line) != kRecordHeader) {
    throw ParseError(path.string() + ": unexpected column header");
  }
  std::vector<InteractionRecord> records;
  while (std::getline(in, line)) {
    ++line_no;
    auto view = trim_cr(line);
    if (view.empty()) continue;
    auto f = split_fields(view, "\t");
    if (f.size() != 5) throw ParseError(path.string() + " line " + std::to_string(line_no) + ": expected 5 fields");
    InteractionRecord r;
    r.user = static_cast<UserId>(parse_int(f[0], "user", line_no));
    r.item = static_cast<ItemId>(parse_int(f[1], "item", line_no));
    r.rating = static_cast<std::uint8_t>(parse_int(f[2], "rating", line_no));
    r.status = parse_status(f[3], f[4], line_no);
    records.push_back(r);
  }
  return PartitionedDataset(std::move(records), n_users, n_items);
}

}  // namespace

void write_split_dataset(const SplitDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_partition(ds.train, dir / "train.tsv");
  write_partition(ds.validation, dir / "validation.tsv");
  write_partition(ds.test, dir / "test.tsv");
  std::ofstream out(dir / "users.tsv");
  if (!out) throw IoError("cannot write " + (dir / "users.tsv").string());
  out << kUserHeader << '\n';
  for (std::size_t u = 0; u < ds.n_users(); ++u) {
    out << u << '\t' << int(ds.true_attr[u]) << '\t' << status_name(ds.user_status[u].state) << '\n';
  }
}

SplitDataset read_split_dataset(const std::filesystem::path& dir) {
  SplitDataset ds;
  ds.train = read_partition(dir / "train.tsv");
  ds.validation = read_partition(dir / "validation.tsv");
  ds.test = read_partition(dir / "test.tsv");
  std::ifstream in(dir / "users.tsv");
  if (!in) throw IoError("cannot open " + (dir / "users.tsv").string());
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line) || trim_cr(line) != kUserHeader) {
    throw ParseError((dir / "users.tsv").string() + ": unexpected header");
  }
  while (std::getline(in, line)) {
    ++line_no;
    auto view = trim_cr(line);
    if (view.empty()) continue;
    auto f = split_fields(view, "\t");
    if (f.size() != 3) throw ParseError("users.tsv line " + std::to_string(line_no) + ": expected 3 fields");
    auto u = static_cast<std::size_t>(parse_int(f[0], "user", line_no));
    if (u != ds.true_attr.size()) throw ParseError("users.tsv line " + std::to_string(line_no) + ": users must be listed densely in order");
    auto s = static_cast<std::int8_t>(parse_int(f[1], "attribute", line_no));
    ds.true_attr.push_back(s);
    auto st = parse_status(f[2], f[1], line_no);
    ds.user_status.push_back(st);
  }
  if (ds.true_attr.size() != ds.train.n_users()) {
    throw IntegrityError("users.tsv lists " + std::to_string(ds.true_attr.size()) +
                         " users but the records use " + std::to_string(ds.train.n_users()));
  }
  return ds;
}

}  // namespace drfo
