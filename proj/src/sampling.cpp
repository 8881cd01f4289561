#include "incdet/sampling.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "json.hpp"

namespace incdet {

using nlohmann::json;

const char* sampling_strategy_name(SamplingStrategy s) {
  switch (s) {
    case SamplingStrategy::random: return "random";
    case SamplingStrategy::hard: return "hard";
    case SamplingStrategy::adaptive: return "adaptive";
  }
  return "?";
}

SamplingStrategy sampling_strategy_from_name(const std::string& name) {
  if (name == "random") return SamplingStrategy::random;
  if (name == "hard") return SamplingStrategy::hard;
  if (name == "adaptive") return SamplingStrategy::adaptive;
  throw Error("unknown sampling strategy: " + name);
}

std::vector<std::string> rank_by_boxes(const TaskDataset& ds, int cls, const SamplingOptions& opts) {
  check(cls >= 0 && cls < ds.num_classes(),
        "rank_by_boxes: unknown class " + std::to_string(cls) + " for task " + ds.name);
  struct Entry {
    int count;
    const std::string* id;
  };
  std::vector<Entry> entries;
  for (const LabeledImage& li : ds.train) {
    int cls_count = 0, total = 0;
    for (const BoundingBox& b : li.boxes) {
      ++total;
      if (b.label == cls) ++cls_count;
    }
    if (cls_count > 0) entries.push_back({opts.rank_by_total_boxes ? total : cls_count, &li.id});
  }
  check(!entries.empty(), "rank_by_boxes: class " + std::to_string(cls) +
                              " absent from training split of task " + ds.name);
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.count != b.count) return a.count > b.count;
    return *a.id < *b.id;
  });
  std::vector<std::string> out;
  out.reserve(entries.size());
  for (const Entry& e : entries) out.push_back(*e.id);
  return out;
}

ExemplarSet sample_exemplars(const TaskDataset& ds, int task_id, int s, int eta,
                             SamplingStrategy strategy, std::uint64_t seed,
                             const SamplingOptions& opts) {
  check(s >= 1, "sample_exemplars: budget s must be >= 1");
  check(eta >= 1, "sample_exemplars: eta must be >= 1");

  ExemplarSet ex;
  ex.budget_per_class = s;
  ex.strategy = strategy;
  ex.eta = eta;
  ex.seed = seed;

  struct ClassState {
    std::vector<std::string> ranked;
    int window = 0;
    std::size_t backfill_pos = 0;
  };
  std::vector<ClassState> states;
  std::set<std::string> chosen;
  std::size_t target_total = 0;

  for (int cls = 0; cls < ds.num_classes(); ++cls) {
    bool present = false;
    for (const LabeledImage& li : ds.train) {
      for (const BoundingBox& b : li.boxes)
        if (b.label == cls) {
          present = true;
          break;
        }
      if (present) break;
    }
    if (!present) continue;  // nothing to store for this class

    ClassState st;
    st.ranked = rank_by_boxes(ds, cls, opts);
    const int k = static_cast<int>(st.ranked.size());
    if (s > k)
      std::cerr << "sample_exemplars: class " << cls << " of task " << ds.name << " has only " << k
                << " candidates for budget " << s << "; taking all\n";
    const int take = std::min(s, k);
    target_total += static_cast<std::size_t>(take);
    switch (strategy) {
      case SamplingStrategy::hard: st.window = take; break;
      case SamplingStrategy::random: st.window = k; break;
      case SamplingStrategy::adaptive: st.window = std::min(eta * s, k); break;
    }
    st.backfill_pos = static_cast<std::size_t>(st.window);

    // uniform sample of `take` without replacement from the window
    std::mt19937_64 rng = make_rng(mix64(seed, 0xE4, static_cast<std::uint64_t>(cls)));
    std::vector<int> idx(static_cast<std::size_t>(st.window));
    for (int i = 0; i < st.window; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < take; ++i) {
      std::uniform_int_distribution<int> pick(i, st.window - 1);
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    }
    for (int i = 0; i < take; ++i) {
      const std::string& id = st.ranked[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
      if (chosen.insert(id).second) ex.items.push_back({id, task_id});
    }
    states.push_back(std::move(st));
  }

  // backfill the dedup shortfall from beyond each window, round-robin
  bool progressed = true;
  while (ex.items.size() < target_total && progressed) {
    progressed = false;
    for (ClassState& st : states) {
      if (ex.items.size() >= target_total) break;
      while (st.backfill_pos < st.ranked.size()) {
        const std::string& id = st.ranked[st.backfill_pos++];
        if (chosen.insert(id).second) {
          ex.items.push_back({id, task_id});
          progressed = true;
          break;
        }
      }
    }
  }
  return ex;
}

void save_exemplar_set(const ExemplarSet& ex, const std::filesystem::path& path) {
  json j;
  j["budget_per_class"] = ex.budget_per_class;
  j["strategy"] = sampling_strategy_name(ex.strategy);
  j["eta"] = ex.eta;
  j["seed"] = ex.seed;
  j["items"] = json::array();
  for (const auto& it : ex.items) j["items"].push_back({{"image_id", it.image_id}, {"task", it.task_id}});
  std::ofstream out(path);
  check(out.good(), "save_exemplar_set: cannot write " + path.string());
  out << j.dump(2) << "\n";
}

ExemplarSet load_exemplar_set(const std::filesystem::path& path) {
  std::ifstream in(path);
  check(in.good(), "load_exemplar_set: cannot open " + path.string());
  json j;
  in >> j;
  ExemplarSet ex;
  ex.budget_per_class = j.at("budget_per_class").get<int>();
  ex.strategy = sampling_strategy_from_name(j.at("strategy").get<std::string>());
  ex.eta = j.at("eta").get<int>();
  ex.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& it : j.at("items"))
    ex.items.push_back({it.at("image_id").get<std::string>(), it.at("task").get<int>()});
  return ex;
}

ExemplarBatcher::ExemplarBatcher(std::vector<ExemplarItem> items, int batch_size, std::uint64_t seed)
    : items_(std::move(items)), batch_size_(batch_size), rng_(make_rng(mix64(seed, 0xBA7C))) {
  check(batch_size_ >= 1, "ExemplarBatcher: batch size must be >= 1");
  pos_ = items_.size();  // first next() starts a fresh cycle
}

std::size_t ExemplarBatcher::batches_per_cycle() const {
  return (items_.size() + static_cast<std::size_t>(batch_size_) - 1) /
         static_cast<std::size_t>(batch_size_);
}

std::vector<ExemplarItem> ExemplarBatcher::next() {
  if (items_.empty()) return {};
  if (pos_ >= items_.size()) {
    std::shuffle(items_.begin(), items_.end(), rng_);
    pos_ = 0;
  }
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch_size_),
                                              items_.size() - pos_);
  std::vector<ExemplarItem> out(items_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                items_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
  pos_ += n;
  return out;
}

}  // namespace incdet
