#pragma once

// Generators and independent oracles shared by the unit and acceptance tests.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crsel/crsel.hpp"

namespace testing_support {

using crsel::RngCursor;
using crsel::RngState;
using crsel::Shape;
using crsel::Tensor;

inline Tensor random_tensor(Shape s, RngCursor& rng, double lo = -1, double hi = 1) {
  Tensor t(s);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

inline crsel::BasicTensor<double> random_tensor_d(Shape s, RngCursor& rng, double lo = -1, double hi = 1) {
  crsel::BasicTensor<double> t(s);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Random selector configuration: shape, params and image.
struct SelectorCase {
  Tensor x;
  Tensor image;
  crsel::CRSelectorParams<float> params;
  std::uint64_t seed = 0;
};

inline SelectorCase random_selector_case(RngCursor& rng, bool zero_out) {
  SelectorCase sc;
  const std::size_t m = 1 + rng.below(3);
  const std::size_t n = 1 + rng.below(2);
  const std::size_t c = 1 + rng.below(4);
  const std::size_t c_img = 1 + rng.below(3);
  const std::size_t h = m * (1 + rng.below(4));
  const std::size_t w = m * (1 + rng.below(4));
  sc.seed = rng.below(1u << 30);
  sc.x = random_tensor(Shape{n, c, h, w}, rng, -2, 2);
  sc.image = random_tensor(Shape{n, c_img, 1 + rng.below(20), 1 + rng.below(20)}, rng, 0, 1);
  sc.params = crsel::random_crselector_params<float>(c, c_img, m, RngState{sc.seed}.stream("test/params"));
  sc.params.hard_mask = rng.uniform() < 0.5;
  sc.params.r = static_cast<float>(rng.uniform(0.0, 3.0));
  sc.params.tau = static_cast<float>(rng.uniform(0.2, 2.0));
  if (zero_out) sc.params.out_conv = crsel::Conv1x1Params<float>::zeros(c, c);
  return sc;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (std::bit_cast<std::uint32_t>(a[k]) != std::bit_cast<std::uint32_t>(b[k])) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Metric oracle. Matching is found by enumerating every injective partial
// assignment of detections to ground truths and keeping the lexicographically
// greatest one, read in score order, under the key
// (counted match > ignored match > none, larger IoU, lower GT index).
// AP is recomputed from the pooled sequence with an O(n^2) envelope.

struct OracleSlice {
  std::vector<crsel::eval::BBox> dets;
  std::vector<double> scores;
  std::vector<bool> det_outside;
  std::vector<crsel::eval::BBox> gts;
  std::vector<bool> gt_outside;
};

struct OracleMatch {
  std::vector<std::size_t> order;
  std::vector<int> label;  // 1 TP, 0 FP, -1 ignored
};

inline double oracle_iou(const crsel::eval::BBox& a, const crsel::eval::BBox& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline OracleMatch oracle_match(const OracleSlice& s, double thresh) {
  const std::size_t nd = s.dets.size();
  const std::size_t ng = s.gts.size();
  OracleMatch out;
  for (std::size_t i = 0; i < nd; ++i) out.order.push_back(i);
  // insertion sort keeps input order among equal scores
  for (std::size_t i = 1; i < nd; ++i) {
    for (std::size_t j = i; j > 0 && s.scores[out.order[j]] > s.scores[out.order[j - 1]]; --j) {
      std::swap(out.order[j], out.order[j - 1]);
    }
  }

  using Key = std::array<double, 3>;
  std::vector<Key> best_key;
  std::vector<int> best_assign;
  std::vector<int> assign(nd, -1);
  std::vector<bool> used(ng, false);

  auto key_of = [&](std::size_t det, int g) -> Key {
    if (g < 0) return {0, 0, 0};
    return {s.gt_outside[static_cast<std::size_t>(g)] ? 1.0 : 2.0, oracle_iou(s.dets[det], s.gts[g]),
            -static_cast<double>(g)};
  };
  auto consider = [&] {
    std::vector<Key> key;
    for (std::size_t r = 0; r < nd; ++r) key.push_back(key_of(out.order[r], assign[r]));
    if (best_assign.empty() || key > best_key) {
      best_key = key;
      best_assign = assign;
    }
  };
  auto rec = [&](auto&& self, std::size_t r) -> void {
    if (r == nd) {
      consider();
      return;
    }
    assign[r] = -1;
    self(self, r + 1);
    for (std::size_t g = 0; g < ng; ++g) {
      if (used[g] || oracle_iou(s.dets[out.order[r]], s.gts[g]) < thresh) continue;
      used[g] = true;
      assign[r] = static_cast<int>(g);
      self(self, r + 1);
      used[g] = false;
      assign[r] = -1;
    }
  };
  rec(rec, 0);

  for (std::size_t r = 0; r < nd; ++r) {
    const int g = best_assign[r];
    if (g >= 0) {
      out.label.push_back(s.gt_outside[static_cast<std::size_t>(g)] ? -1 : 1);
    } else {
      out.label.push_back(s.det_outside[out.order[r]] ? -1 : 0);
    }
  }
  return out;
}

inline std::optional<double> oracle_ap(const std::vector<bool>& tp, std::size_t n_gt, std::size_t points) {
  if (n_gt == 0) return std::nullopt;
  std::vector<double> rec, prec;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    hits += tp[i] ? 1 : 0;
    rec.push_back(static_cast<double>(hits) / static_cast<double>(n_gt));
    prec.push_back(static_cast<double>(hits) / static_cast<double>(i + 1));
  }
  double sum = 0;
  for (std::size_t k = 0; k < points; ++k) {
    const double r = static_cast<double>(k) / static_cast<double>(points - 1);
    double best = 0;
    bool any = false;
    for (std::size_t i = 0; i < rec.size(); ++i) {
      if (rec[i] >= r) {
        best = any ? std::max(best, prec[i]) : prec[i];
        any = true;
      }
    }
    sum += best;
  }
  return sum / static_cast<double>(points);
}

struct OracleResult {
  std::optional<double> map, map50, map_s, map_m, map_l;
  std::map<std::int64_t, std::optional<double>> ap, ap50;
};

inline OracleResult oracle_evaluate(const std::vector<crsel::eval::Detection>& dets,
                                    const std::vector<crsel::eval::GroundTruthBox>& gts, std::size_t points = 101) {
  std::set<std::int64_t> classes;
  std::set<std::string> images;
  for (const auto& d : dets) {
    classes.insert(d.class_id);
    images.insert(d.image_id);
  }
  for (const auto& g : gts) {
    classes.insert(g.class_id);
    images.insert(g.image_id);
  }
  std::vector<double> thresholds;
  for (int k = 0; k < 10; ++k) thresholds.push_back((50.0 + 5.0 * k) / 100.0);

  auto area = [](const crsel::eval::BBox& b) { return (b.x2 - b.x1) * (b.y2 - b.y1); };
  auto outside = [&](double a, int range) {
    switch (range) {
      case 1: return !(a < 1024.0);
      case 2: return !(a >= 1024.0 && a <= 9216.0);
      case 3: return !(a > 9216.0);
      default: return false;
    }
  };
  auto mean = [](const std::vector<std::optional<double>>& v) -> std::optional<double> {
    double s = 0;
    std::size_t c = 0;
    for (const auto& x : v) {
      if (x) {
        s += *x;
        ++c;
      }
    }
    if (!c) return std::nullopt;
    return s / static_cast<double>(c);
  };

  OracleResult res;
  for (int range = 0; range < 4; ++range) {
    std::vector<std::optional<double>> flat;
    for (auto c : classes) {
      std::vector<std::optional<double>> row;
      for (double t : thresholds) {
        struct Item {
          double score;
          std::size_t image_rank;
          std::size_t within;
          bool tp;
        };
        std::vector<Item> items;
        std::size_t n_gt = 0;
        std::size_t image_rank = 0;
        for (const auto& im : images) {
          OracleSlice s;
          for (const auto& d : dets) {
            if (d.image_id != im || d.class_id != c) continue;
            s.dets.push_back(d.box);
            s.scores.push_back(d.score);
            s.det_outside.push_back(outside(area(d.box), range));
          }
          for (const auto& g : gts) {
            if (g.image_id != im || g.class_id != c) continue;
            s.gts.push_back(g.box);
            const bool o = outside(area(g.box), range);
            s.gt_outside.push_back(o);
            if (!o) ++n_gt;
          }
          const auto m = oracle_match(s, t);
          for (std::size_t r = 0; r < m.order.size(); ++r) {
            if (m.label[r] < 0) continue;
            items.push_back({s.scores[m.order[r]], image_rank, r, m.label[r] == 1});
          }
          ++image_rank;
        }
        std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
          if (a.score != b.score) return a.score > b.score;
          if (a.image_rank != b.image_rank) return a.image_rank < b.image_rank;
          return a.within < b.within;
        });
        std::vector<bool> tp;
        for (const auto& it : items) tp.push_back(it.tp);
        row.push_back(oracle_ap(tp, n_gt, points));
      }
      flat.insert(flat.end(), row.begin(), row.end());
      if (range == 0) {
        res.ap[c] = mean(row);
        res.ap50[c] = row[0];
      }
    }
    const auto m = mean(flat);
    if (range == 0) res.map = m;
    if (range == 1) res.map_s = m;
    if (range == 2) res.map_m = m;
    if (range == 3) res.map_l = m;
  }
  std::vector<std::optional<double>> at50;
  for (auto c : classes) at50.push_back(res.ap50[c]);
  res.map50 = mean(at50);
  return res;
}

inline bool same_optional(const std::optional<double>& a, const std::optional<double>& b) {
  if (a.has_value() != b.has_value()) return false;
  return !a || *a == *b;
}

inline bool oracle_agrees(const crsel::eval::EvalResult& r, const OracleResult& o, std::string* why = nullptr) {
  auto check = [&](const char* name, const std::optional<double>& a, const std::optional<double>& b) {
    if (same_optional(a, b)) return true;
    if (why) {
      std::ostringstream os;
      os << name << ": evaluate=" << (a ? std::to_string(*a) : "-") << " oracle=" << (b ? std::to_string(*b) : "-");
      *why = os.str();
    }
    return false;
  };
  if (!check("map", r.map, o.map) || !check("map50", r.map50, o.map50) || !check("map_s", r.map_s, o.map_s) ||
      !check("map_m", r.map_m, o.map_m) || !check("map_l", r.map_l, o.map_l)) {
    return false;
  }
  if (r.per_class.size() != o.ap.size()) {
    if (why) *why = "class count differs";
    return false;
  }
  for (const auto& [c, cap] : r.per_class) {
    if (!check("ap", cap.ap, o.ap.at(c)) || !check("ap50", cap.ap50, o.ap50.at(c))) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Files and hashing.

inline std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("crsel_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::uint64_t hash_bytes(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

/// Hash of every regular file in a directory tree, keyed by relative path.
inline std::map<std::string, std::uint64_t> hash_tree(const std::filesystem::path& dir) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    out[std::filesystem::relative(e.path(), dir).string()] = hash_bytes(crsel::read_file(e.path()));
  }
  return out;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace testing_support
