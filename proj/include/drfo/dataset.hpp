#pragma once

// Shared data model: interactions, attribute statuses, dataset partitions.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace drfo {

using UserId = std::uint32_t;
using ItemId = std::uint32_t;
using RecordIndex = std::uint32_t;

enum class AttrState : std::uint8_t { Known, MissingReconstructable, MissingForbidden };

struct AttrStatus {
  AttrState state = AttrState::MissingReconstructable;
  // Sensitive attribute in {0,1}; meaningful only when state == Known.
  std::int8_t s = -1;

  static AttrStatus known(int s) { return {AttrState::Known, static_cast<std::int8_t>(s)}; }
  static AttrStatus reconstructable() { return {AttrState::MissingReconstructable, -1}; }
  static AttrStatus forbidden() { return {AttrState::MissingForbidden, -1}; }

  bool is_known() const { return state == AttrState::Known; }
  friend bool operator==(const AttrStatus&, const AttrStatus&) = default;
};

struct InteractionRecord {
  UserId user = 0;
  ItemId item = 0;
  std::uint8_t rating = 0;  // binary label
  AttrStatus status;

  friend bool operator==(const InteractionRecord&, const InteractionRecord&) = default;
};

// k = known, r = missing but reconstructable, b = missing and forbidden,
// m = r ∪ b.
enum class Partition { Known, Reconstructable, Forbidden, Missing };

Partition parse_partition(std::string_view tag);
std::string_view partition_tag(Partition p);

// Records plus the disjoint known / reconstructable / forbidden index sets.
// Immutable after construction.
class PartitionedDataset {
 public:
  PartitionedDataset() = default;
  PartitionedDataset(std::vector<InteractionRecord> records, std::size_t n_users,
                     std::size_t n_items);

  std::span<const InteractionRecord> records() const { return records_; }
  const InteractionRecord& record(RecordIndex i) const { return records_[i]; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::size_t n_users() const { return n_users_; }
  std::size_t n_items() const { return n_items_; }

  // Ascending record indices of a partition.
  std::span<const RecordIndex> index(Partition p) const;
  // Known records whose attribute equals s.
  std::span<const RecordIndex> group_index(int s) const;

 private:
  std::vector<InteractionRecord> records_;
  std::size_t n_users_ = 0;
  std::size_t n_items_ = 0;
  std::vector<RecordIndex> index_k_, index_r_, index_b_, index_m_;
  std::array<std::vector<RecordIndex>, 2> group_k_;
};

// A partitioned dataset with an attribute estimate ŝ and a confidence for
// every record in the missing partitions.
class ReconstructedDataset {
 public:
  ReconstructedDataset() = default;
  // recon_attr / recon_confidence are indexed by record; entries for known
  // records are ignored.
  ReconstructedDataset(PartitionedDataset base, std::vector<std::int8_t> recon_attr,
                       std::vector<double> recon_confidence);

  const PartitionedDataset& base() const { return base_; }
  // ŝ for a missing record, the known s otherwise.
  int attr(RecordIndex i) const;
  double confidence(RecordIndex i) const;

 private:
  PartitionedDataset base_;
  std::vector<std::int8_t> recon_attr_;
  std::vector<double> recon_confidence_;
};

// Indices of records in `partition` whose attribute equals s, ascending.
// On a plain PartitionedDataset only the known partition carries attributes.
std::vector<RecordIndex> group_subset(const PartitionedDataset& ds, Partition partition, int s);
std::vector<RecordIndex> group_subset(const ReconstructedDataset& ds, Partition partition, int s);

}  // namespace drfo
