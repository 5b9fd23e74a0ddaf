#pragma once

// COCO-style detection metrics: IoU, greedy score-ordered matching,
// interpolated average precision, and size-stratified mAP.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace crsel::eval {

struct BBox {
  double x1 = 0;
  double y1 = 0;
  double x2 = 0;
  double y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x2 >= x1 &&
           y2 >= y1;
  }
};

struct Detection {
  std::string image_id;
  std::int64_t class_id = 0;
  BBox box;
  double score = 0;
};

struct GroundTruthBox {
  std::string image_id;
  std::int64_t class_id = 0;
  BBox box;
};

/// Intersection over union; 0 when the union is empty.
inline double iou(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

enum class MatchLabel { true_positive, false_positive, ignored };

/// Matching outcome for one (image, class) slice; entries follow `order`.
struct SliceMatch {
  std::vector<std::size_t> order;           // detection indices by descending score
  std::vector<MatchLabel> labels;
  std::vector<std::ptrdiff_t> matched_gt;   // -1 when unmatched
  std::size_t n_gt = 0;                     // ground truths that count toward recall
};

/// Indices of `scores` sorted by descending score, ties kept in input order.
inline std::vector<std::size_t> score_order(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

/// Greedy matching of one slice. Each detection, in score order, takes the
/// unmatched counted GT with the highest IoU >= thresh (lowest index on
/// ties); only if none exists may it take an ignored GT, which makes the
/// detection ignored too. Unmatched detections flagged in `det_ignore` are
/// ignored rather than counted as false positives.
inline SliceMatch match_detections(const std::vector<BBox>& dets, const std::vector<double>& scores,
                                   const std::vector<BBox>& gts, double iou_thresh,
                                   const std::vector<bool>& gt_ignore = {},
                                   const std::vector<bool>& det_ignore = {}) {
  auto gt_ignored = [&](std::size_t g) { return !gt_ignore.empty() && gt_ignore[g]; };
  SliceMatch res;
  res.order = score_order(scores);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (!gt_ignored(g)) ++res.n_gt;
  }
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t d : res.order) {
    std::ptrdiff_t best = -1;
    double best_iou = 0;
    for (int pass = 0; pass < 2 && best < 0; ++pass) {
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (taken[g] || gt_ignored(g) != (pass == 1)) continue;
        const double v = iou(dets[d], gts[g]);
        if (v >= iou_thresh && (best < 0 || v > best_iou)) {
          best = static_cast<std::ptrdiff_t>(g);
          best_iou = v;
        }
      }
    }
    MatchLabel label = MatchLabel::false_positive;
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      label = gt_ignored(static_cast<std::size_t>(best)) ? MatchLabel::ignored : MatchLabel::true_positive;
    } else if (!det_ignore.empty() && det_ignore[d]) {
      label = MatchLabel::ignored;
    }
    res.labels.push_back(label);
    res.matched_gt.push_back(best);
  }
  return res;
}

/// Convenience overload for a single image/class slice of records.
inline SliceMatch match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts,
                                   double iou_thresh) {
  std::vector<BBox> dboxes;
  std::vector<double> scores;
  std::vector<BBox> gboxes;
  for (const auto& d : dets) {
    dboxes.push_back(d.box);
    scores.push_back(d.score);
  }
  for (const auto& g : gts) gboxes.push_back(g.box);
  return match_detections(dboxes, scores, gboxes, iou_thresh);
}

enum class Interpolation { coco101, voc11 };

/// Interpolated AP of a score-ordered TP/FP sequence: mean over recall
/// thresholds of the maximum precision at any recall >= threshold.
/// Absent when there is no ground truth.
inline std::optional<double> average_precision(const std::vector<bool>& is_tp, std::size_t n_gt,
                                               Interpolation mode = Interpolation::coco101) {
  if (n_gt == 0) return std::nullopt;
  const std::size_t n = is_tp.size();
  std::vector<double> recall(n);
  std::vector<double> precision(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (is_tp[i]) ++tp;
    recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  const std::size_t points = mode == Interpolation::coco101 ? 101 : 11;
  double sum = 0;
  for (std::size_t k = 0; k < points; ++k) {
    const double r = static_cast<double>(k) / static_cast<double>(points - 1);
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / static_cast<double>(points);
}

enum class AreaRange { all, small, medium, large };

inline constexpr double kSmallMaxArea = 32.0 * 32.0;
inline constexpr double kMediumMaxArea = 96.0 * 96.0;

/// small: area < 32^2, medium: 32^2 <= area <= 96^2, large: area > 96^2.
inline bool in_range(double area, AreaRange range) {
  switch (range) {
    case AreaRange::all: return true;
    case AreaRange::small: return area < kSmallMaxArea;
    case AreaRange::medium: return area >= kSmallMaxArea && area <= kMediumMaxArea;
    case AreaRange::large: return area > kMediumMaxArea;
  }
  return false;
}

struct EvalConfig {
  std::vector<double> iou_thresholds = default_thresholds();
  Interpolation interpolation = Interpolation::coco101;

  /// 0.50, 0.55, ..., 0.95
  static std::vector<double> default_thresholds() {
    std::vector<double> t;
    for (int k = 0; k < 10; ++k) t.push_back(static_cast<double>(50 + 5 * k) / 100.0);
    return t;
  }
};

struct ClassAP {
  std::optional<double> ap;    // mean over IoU thresholds
  std::optional<double> ap50;  // at IoU 0.5
};

struct EvalResult {
  std::optional<double> map;
  std::optional<double> map50;
  std::optional<double> map_s;
  std::optional<double> map_m;
  std::optional<double> map_l;
  std::map<std::int64_t, ClassAP> per_class;
  /// ap[range][class index][threshold index]; classes in `per_class` order.
  std::map<AreaRange, std::vector<std::vector<std::optional<double>>>> table;
};

namespace detail {
inline std::optional<double> mean_present(const std::vector<std::optional<double>>& values) {
  double sum = 0;
  std::size_t count = 0;
  for (const auto& v : values) {
    if (v) {
      sum += *v;
      ++count;
    }
  }
  if (count == 0) return std::nullopt;
  return sum / static_cast<double>(count);
}
}  // namespace detail

/// AP for one class, area range and IoU threshold, pooling all images.
inline std::optional<double> class_ap(const std::vector<const Detection*>& dets,
                                      const std::vector<const GroundTruthBox*>& gts, double thresh,
                                      AreaRange range, Interpolation mode) {
  std::set<std::string> images;
  for (auto* d : dets) images.insert(d->image_id);
  for (auto* g : gts) images.insert(g->image_id);

  struct Scored {
    double score;
    bool tp;
  };
  std::vector<Scored> pooled;
  std::size_t n_gt = 0;
  for (const auto& image : images) {
    std::vector<BBox> dboxes;
    std::vector<double> scores;
    std::vector<bool> dignore;
    std::vector<BBox> gboxes;
    std::vector<bool> gignore;
    for (auto* d : dets) {
      if (d->image_id != image) continue;
      dboxes.push_back(d->box);
      scores.push_back(d->score);
      dignore.push_back(!in_range(d->box.area(), range));
    }
    for (auto* g : gts) {
      if (g->image_id != image) continue;
      gboxes.push_back(g->box);
      gignore.push_back(!in_range(g->box.area(), range));
    }
    const SliceMatch m = match_detections(dboxes, scores, gboxes, thresh, gignore, dignore);
    n_gt += m.n_gt;
    for (std::size_t k = 0; k < m.order.size(); ++k) {
      if (m.labels[k] == MatchLabel::ignored) continue;
      pooled.push_back({scores[m.order[k]], m.labels[k] == MatchLabel::true_positive});
    }
  }
  std::stable_sort(pooled.begin(), pooled.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  std::vector<bool> is_tp;
  is_tp.reserve(pooled.size());
  for (const auto& s : pooled) is_tp.push_back(s.tp);
  return average_precision(is_tp, n_gt, mode);
}

inline EvalResult evaluate(const std::vector<Detection>& dets, const std::vector<GroundTruthBox>& gts,
                           const EvalConfig& config = {}) {
  for (const auto& d : dets) {
    if (!d.box.valid()) throw std::invalid_argument("detection on image " + d.image_id + " has an invalid box");
    if (!(d.score >= 0 && d.score <= 1)) {
      throw std::invalid_argument("detection on image " + d.image_id + " has score outside [0,1]");
    }
  }
  for (const auto& g : gts) {
    if (!g.box.valid()) throw std::invalid_argument("ground truth on image " + g.image_id + " has an invalid box");
  }

  std::map<std::int64_t, std::vector<const Detection*>> dets_by_class;
  std::map<std::int64_t, std::vector<const GroundTruthBox*>> gts_by_class;
  for (const auto& d : dets) dets_by_class[d.class_id].push_back(&d);
  for (const auto& g : gts) gts_by_class[g.class_id].push_back(&g);

  std::set<std::int64_t> classes;
  for (const auto& [c, _] : dets_by_class) classes.insert(c);
  for (const auto& [c, _] : gts_by_class) classes.insert(c);

  EvalResult res;
  std::size_t t50 = config.iou_thresholds.size();
  for (std::size_t t = 0; t < config.iou_thresholds.size(); ++t) {
    if (std::abs(config.iou_thresholds[t] - 0.5) < 1e-12) t50 = t;
  }

  for (AreaRange range : {AreaRange::all, AreaRange::small, AreaRange::medium, AreaRange::large}) {
    auto& table = res.table[range];
    std::vector<std::optional<double>> flat;
    for (std::int64_t c : classes) {
      std::vector<std::optional<double>> row;
      for (double thresh : config.iou_thresholds) {
        row.push_back(class_ap(dets_by_class[c], gts_by_class[c], thresh, range, config.interpolation));
      }
      flat.insert(flat.end(), row.begin(), row.end());
      if (range == AreaRange::all) {
        ClassAP cap;
        cap.ap = detail::mean_present(row);
        if (t50 < row.size()) cap.ap50 = row[t50];
        res.per_class[c] = cap;
      }
      table.push_back(std::move(row));
    }
    const auto m = detail::mean_present(flat);
    switch (range) {
      case AreaRange::all: res.map = m; break;
      case AreaRange::small: res.map_s = m; break;
      case AreaRange::medium: res.map_m = m; break;
      case AreaRange::large: res.map_l = m; break;
    }
  }
  if (t50 < config.iou_thresholds.size()) {
    std::vector<std::optional<double>> at50;
    for (const auto& row : res.table[AreaRange::all]) at50.push_back(row[t50]);
    res.map50 = detail::mean_present(at50);
  }
  return res;
}

/// Malformed box record; carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : std::runtime_error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct BoxFile {
  bool has_scores = false;
  std::vector<Detection> detections;
  std::vector<GroundTruthBox> ground_truth;
};

/// Parses `image_id class_id x1 y1 x2 y2 [score]` records. A trailing score
/// marks a detection file; every record in one file must agree. Blank lines
/// and lines starting with '#' are skipped.
inline BoxFile parse_boxes(std::istream& in, const std::string& source) {
  BoxFile out;
  std::optional<std::size_t> fields_expected;
  std::string line;
  std::size_t lineno = 0;
  auto number = [&](const std::string& tok, const char* what) {
    double v = 0;
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(v)) {
      throw ParseError(source, lineno, std::string("invalid ") + what + " '" + tok + "'");
    }
    return v;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream fields(line);
    std::vector<std::string> tok;
    for (std::string t; fields >> t;) tok.push_back(t);
    if (tok.empty() || tok[0][0] == '#') continue;
    if (tok.size() != 6 && tok.size() != 7) {
      throw ParseError(source, lineno, "expected 6 or 7 fields, got " + std::to_string(tok.size()));
    }
    if (!fields_expected) {
      fields_expected = tok.size();
      out.has_scores = tok.size() == 7;
    } else if (*fields_expected != tok.size()) {
      throw ParseError(source, lineno, "mixes records with and without scores");
    }
    std::int64_t cls = 0;
    {
      const auto& t = tok[1];
      const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), cls);
      if (ec != std::errc() || ptr != t.data() + t.size()) {
        throw ParseError(source, lineno, "invalid class id '" + t + "'");
      }
    }
    BBox box{number(tok[2], "x1"), number(tok[3], "y1"), number(tok[4], "x2"), number(tok[5], "y2")};
    if (!box.valid()) throw ParseError(source, lineno, "box has x2 < x1 or y2 < y1");
    if (out.has_scores) {
      const double score = number(tok[6], "score");
      if (score < 0 || score > 1) throw ParseError(source, lineno, "score outside [0,1]");
      out.detections.push_back({tok[0], cls, box, score});
    } else {
      out.ground_truth.push_back({tok[0], cls, box});
    }
  }
  return out;
}

inline std::string format_metric(const std::optional<double>& v, bool percent) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, percent ? "%.1f" : "%.6f", percent ? *v * 100.0 : *v);
  return buf;
}

/// Plain-text table followed by a key=value block.
inline std::string format_report(const EvalResult& r) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-8s %-10s %-10s %-10s %-10s\n", "mAP(%)", "mAP50(%)", "mAP_S(%)", "mAP_M(%)",
                "mAP_L(%)");
  os << buf;
  std::snprintf(buf, sizeof buf, "%-8s %-10s %-10s %-10s %-10s\n", format_metric(r.map, true).c_str(),
                format_metric(r.map50, true).c_str(), format_metric(r.map_s, true).c_str(),
                format_metric(r.map_m, true).c_str(), format_metric(r.map_l, true).c_str());
  os << buf << "\n";
  std::snprintf(buf, sizeof buf, "%-8s %-10s %-10s\n", "class", "AP(%)", "AP50(%)");
  os << buf;
  for (const auto& [c, ap] : r.per_class) {
    std::snprintf(buf, sizeof buf, "%-8lld %-10s %-10s\n", static_cast<long long>(c),
                  format_metric(ap.ap, true).c_str(), format_metric(ap.ap50, true).c_str());
    os << buf;
  }
  os << "\n";
  os << "map=" << format_metric(r.map, false) << "\n";
  os << "map50=" << format_metric(r.map50, false) << "\n";
  os << "map_s=" << format_metric(r.map_s, false) << "\n";
  os << "map_m=" << format_metric(r.map_m, false) << "\n";
  os << "map_l=" << format_metric(r.map_l, false) << "\n";
  for (const auto& [c, ap] : r.per_class) {
    os << "ap_class_" << c << "=" << format_metric(ap.ap, false) << "\n";
    os << "ap50_class_" << c << "=" << format_metric(ap.ap50, false) << "\n";
  }
  return os.str();
}

}  // namespace crsel::eval
