#pragma once

// Loading, filtering, splitting and attribute masking of rating data.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "drfo/dataset.hpp"

namespace drfo {

struct RatingRow {
  UserId user = 0;
  ItemId item = 0;
  int rating = 0;  // raw scale before binarize(), {0,1} after
};

// Dense-indexed ratings with the true sensitive attribute of every user.
struct RatingTable {
  std::vector<RatingRow> rows;
  std::vector<std::int8_t> user_attr;   // per dense user
  std::vector<std::int64_t> user_ids;   // dense user -> original id
  std::vector<std::int64_t> item_ids;   // dense item -> original id

  std::size_t n_users() const { return user_ids.size(); }
  std::size_t n_items() const { return item_ids.size(); }
};

// MovieLens 1M `ratings.dat` / `users.dat` (UserID::MovieID::Rating::Timestamp,
// UserID::Gender::Age::Occupation::Zip). Gender "M" -> 0, "F" -> 1. Users and
// items are re-indexed densely in ascending original-id order; only users
// that appear in the ratings file get an index.
RatingTable parse_movielens(const std::filesystem::path& ratings_path,
                            const std::filesystem::path& users_path);
RatingTable parse_movielens(std::istream& ratings, std::istream& users);

// rating = 1 iff raw rating > threshold.
RatingTable binarize(const RatingTable& raw, int threshold);

// Iteratively drops users with fewer than user_k and items with fewer than
// item_k interactions until nothing changes, then re-indexes densely
// (original relative order kept). Throws EmptyResultError if nothing is left.
RatingTable k_core_filter(const RatingTable& table, int user_k, int item_k);

struct SplitRatios {
  double train = 0.7;
  double validation = 0.15;
  double test = 0.15;
};

// Largest-remainder apportionment of n records over the three ratios.
// Remainder ties go to the earlier partition (train, validation, test).
std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& ratios);

struct SplitDataset {
  PartitionedDataset train;
  PartitionedDataset validation;
  PartitionedDataset test;
  // Ground truth used only for evaluation and for the oracle trainer.
  std::vector<std::int8_t> true_attr;
  // Attribute status of each user during training and validation.
  std::vector<AttrStatus> user_status;

  std::size_t n_users() const { return true_attr.size(); }
  std::size_t n_items() const { return train.n_items(); }
};

// Global random split over interactions; every status starts Known(true s).
SplitDataset split(const RatingTable& table, const SplitRatios& ratios, std::uint64_t seed);

struct MaskPlan {
  double retention_ratio = 1.0;
  double forbid_fraction = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Draws round(retention * n_users) users without replacement to keep their
// attribute; round(forbid_fraction * masked) of the rest become forbidden.
// Statuses are applied per user to train and validation; test stays Known.
SplitDataset apply_mask_plan(const SplitDataset& split, const MaskPlan& plan);

// Replaces the attribute statuses of train/validation with per-user ones.
SplitDataset with_user_status(const SplitDataset& split, std::vector<AttrStatus> user_status);

// Synthetic interaction data with a binary sensitive attribute that both
// shifts which items a user consumes (so it can be inferred from history)
// and how they rate them (so an unconstrained model is unfair).
struct SyntheticConfig {
  std::size_t n_users = 800;
  std::size_t n_items = 1000;
  double p_group1 = 0.7317;                       // P(S = 1)
  std::size_t min_interactions = 50;
  std::array<double, 2> mean_extra_interactions = {45.0, 55.0};
  std::array<double, 2> target_mean_rating = {0.5866, 0.5661};
  std::size_t latent_dim = 8;
  double latent_scale = 1.5;       // std of user/item latent factors
  double item_bias_scale = 0.8;
  double user_bias_scale = 0.2;
  double popularity_skew = 1.0;    // log-normal sigma of item popularity
  double choice_taste_weight = 0.0;  // how much taste drives item choice
  double attr_choice_signal = 0.2;   // group tilt of item choice
  double attr_rating_signal = 1.2;   // group x item-lean rating interaction
  std::uint64_t seed = 1;

  // Desk-scale analogue of the filtered MovieLens 1M statistics.
  static SyntheticConfig movielens_like(std::size_t n_users = 800, std::uint64_t seed = 1);
  // Desk-scale analogue of the Tenrec QB-video statistics.
  static SyntheticConfig tenrec_like(std::size_t n_users = 800, std::uint64_t seed = 1);
};

// Ratings are binary; user ids are 1-based original ids like MovieLens.
RatingTable generate_synthetic(const SyntheticConfig& config);

// Canonical on-disk form: train.tsv / validation.tsv / test.tsv with header
// `user\titem\trating\tstatus\ts` (status in {known, missing, forbidden}; s
// blank unless known) and users.tsv with `user\ts\tstatus`.
void write_split_dataset(const SplitDataset& ds, const std::filesystem::path& dir);
SplitDataset read_split_dataset(const std::filesystem::path& dir);

}  // namespace drfo
