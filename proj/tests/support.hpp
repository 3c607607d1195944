#pragma once

// Small builders shared by the unit tests.

#include <cstdint>
#include <random>
#include <vector>

#include "drfo/dataset.hpp"
#include "drfo/ingestion.hpp"
#include "drfo/mf.hpp"
#include "drfo/random.hpp"

namespace drfo::testing {

inline InteractionRecord rec(UserId u, ItemId v, int rating, AttrStatus status = AttrStatus::reconstructable()) {
  return {u, v, static_cast<std::uint8_t>(rating), status};
}

// n_users x n_items toy with random labels; user u has attribute u % 2 and
// is known iff known_mask(u).
template <typename KnownFn>
PartitionedDataset toy_dataset(std::size_t n_users, std::size_t n_items, std::uint64_t seed, KnownFn known,
                               double density = 0.6) {
  Rng rng(seed);
  std::bernoulli_distribution keep(density), label(0.5);
  std::vector<InteractionRecord> records;
  for (UserId u = 0; u < n_users; ++u) {
    const AttrStatus st = known(u) ? AttrStatus::known(static_cast<int>(u % 2)) : AttrStatus::reconstructable();
    bool any = false;
    for (ItemId v = 0; v < n_items; ++v) {
      if (!keep(rng) && (any || v + 1 < n_items)) continue;
      records.push_back(rec(u, v, label(rng) ? 1 : 0, st));
      any = true;
    }
  }
  return PartitionedDataset(std::move(records), n_users, n_items);
}

// Same records with each user's status replaced by status(u).
template <typename StatusFn>
PartitionedDataset with_status(const PartitionedDataset& ds, StatusFn status) {
  std::vector<InteractionRecord> records(ds.records().begin(), ds.records().end());
  for (auto& r : records) r.status = status(r.user);
  return PartitionedDataset(std::move(records), ds.n_users(), ds.n_items());
}

// Reconstruction with attribute u % 2 for every missing record, flipped for
// users where flip(u) holds; confidence 0.8.
template <typename FlipFn>
ReconstructedDataset reconstructed(const PartitionedDataset& ds, FlipFn flip) {
  std::vector<std::int8_t> attr(ds.size(), -1);
  std::vector<double> conf(ds.size(), 1.0);
  for (RecordIndex i = 0; i < ds.size(); ++i) {
    const auto& r = ds.record(i);
    if (r.status.is_known()) continue;
    const int s = static_cast<int>(r.user % 2);
    attr[i] = static_cast<std::int8_t>(flip(r.user) ? 1 - s : s);
    conf[i] = 0.8;
  }
  return ReconstructedDataset(ds, std::move(attr), std::move(conf));
}

// Random model with parameters of a given scale (larger than init_model's,
// so predictions spread away from 0.5).
inline MFModel random_model(std::size_t n_users, std::size_t n_items, std::size_t dim, std::uint64_t seed,
                            double scale = 0.5) {
  MFModel m(n_users, n_items, dim);
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  for (double& p : m.params()) p = g(rng);
  return m;
}

// Synthetic rating table small enough for end-to-end tests.
inline RatingTable small_table(std::size_t n_users = 120, std::uint64_t seed = 3) {
  auto cfg = SyntheticConfig::movielens_like(n_users, seed);
  cfg.n_items = 150;
  cfg.min_interactions = 20;
  cfg.mean_extra_interactions = {10.0, 12.0};
  return generate_synthetic(cfg);
}

}  // namespace drfo::testing
