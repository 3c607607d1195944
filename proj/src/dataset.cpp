#include "drfo/dataset.hpp"

#include "drfo/errors.hpp"

namespace drfo {

Partition parse_partition(std::string_view tag) {
  if (tag == "k") return Partition::Known;
  if (tag == "r") return Partition::Reconstructable;
  if (tag == "b") return Partition::Forbidden;
  if (tag == "m") return Partition::Missing;
  throw UsageError("unknown partition tag '" + std::string(tag) + "' (expected k, r, b or m)");
}

std::string_view partition_tag(Partition p) {
  switch (p) {
    case Partition::Known: return "k";
    case Partition::Reconstructable: return "r";
    case Partition::Forbidden: return "b";
    case Partition::Missing: return "m";
  }
  return "?";
}

PartitionedDataset::PartitionedDataset(std::vector<InteractionRecord> records, std::size_t n_users,
                                       std::size_t n_items)
    : records_(std::move(records)), n_users_(n_users), n_items_(n_items) {
  for (RecordIndex i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    if (r.user >= n_users_ || r.item >= n_items_) {
      throw IntegrityError("record " + std::to_string(i) + " references user " +
                           std::to_string(r.user) + " / item " + std::to_string(r.item) +
                           " outside the index space");
    }
    if (r.rating > 1) throw IntegrityError("record " + std::to_string(i) + " has non-binary rating");
    switch (r.status.state) {
      case AttrState::Known:
        if (r.status.s != 0 && r.status.s != 1) {
          throw IntegrityError("record " + std::to_string(i) + " is known with attribute " +
                               std::to_string(r.status.s));
        }
        index_k_.push_back(i);
        group_k_[r.status.s].push_back(i);
        break;
      case AttrState::MissingReconstructable:
        index_r_.push_back(i);
        index_m_.push_back(i);
        break;
      case AttrState::MissingForbidden:
        index_b_.push_back(i);
        index_m_.push_back(i);
        break;
    }
  }
}

std::span<const RecordIndex> PartitionedDataset::index(Partition p) const {
  switch (p) {
    case Partition::Known: return index_k_;
    case Partition::Reconstructable: return index_r_;
    case Partition::Forbidden: return index_b_;
    case Partition::Missing: return index_m_;
  }
  return {};
}

std::span<const RecordIndex> PartitionedDataset::group_index(int s) const {
  if (s != 0 && s != 1) throw UsageError("sensitive attribute must be 0 or 1");
  return group_k_[s];
}

ReconstructedDataset::ReconstructedDataset(PartitionedDataset base,
                                           std::vector<std::int8_t> recon_attr,
                                           std::vector<double> recon_confidence)
    : base_(std::move(base)),
      recon_attr_(std::move(recon_attr)),
      recon_confidence_(std::move(recon_confidence)) {
  if (recon_attr_.size() != base_.size() || recon_confidence_.size() != base_.size()) {
    throw IntegrityError("reconstruction vectors must have one entry per record");
  }
  for (RecordIndex i : base_.index(Partition::Missing)) {
    if (recon_attr_[i] != 0 && recon_attr_[i] != 1) {
      throw IntegrityError("missing record " + std::to_string(i) + " has no reconstructed attribute");
    }
    if (!(recon_confidence_[i] >= 0.0 && recon_confidence_[i] <= 1.0)) {
      throw IntegrityError("missing record " + std::to_string(i) + " has confidence outside [0,1]");
    }
  }
}

int ReconstructedDataset::attr(RecordIndex i) const {
  const auto& r = base_.record(i);
  return r.status.is_known() ? r.status.s : recon_attr_[i];
}

double ReconstructedDataset::confidence(RecordIndex i) const {
  return base_.record(i).status.is_known() ? 1.0 : recon_confidence_[i];
}

namespace {
void check_s(int s) {
  if (s != 0 && s != 1) throw UsageError("sensitive attribute must be 0 or 1");
}
}  // namespace

std::vector<RecordIndex> group_subset(const PartitionedDataset& ds, Partition partition, int s) {
  check_s(s);
  if (partition != Partition::Known) {
    if (ds.index(partition).empty()) return {};
    throw UsageError("partition '" + std::string(partition_tag(partition)) +
                     "' has no attributes without a reconstruction");
  }
  auto g = ds.group_index(s);
  return {g.begin(), g.end()};
}

std::vector<RecordIndex> group_subset(const ReconstructedDataset& ds, Partition partition, int s) {
  check_s(s);
  std::vector<RecordIndex> out;
  for (RecordIndex i : ds.base().index(partition)) {
    if (ds.attr(i) == s) out.push_back(i);
  }
  return out;
}

}  // namespace drfo
