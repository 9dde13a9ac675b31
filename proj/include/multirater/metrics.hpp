#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "multirater/tensor.hpp"

namespace multirater {

/// Nonempty list of equally shaped binary masks.
using SampleSet = std::vector<Mask>;

inline void require_nonempty(const SampleSet& s, const char* what) {
    if (s.empty()) throw std::invalid_argument(std::string(what) + ": empty sample set");
}

/// Pixelwise mean of the rater masks: the fraction of raters marking each
/// pixel foreground.
inline Tensor probability_map(const SampleSet& rater_masks) {
    require_nonempty(rater_masks, "probability_map");
    const Mask& first = rater_masks.front();
    Tensor map({first.h, first.w});
    for (const Mask& m : rater_masks) {
        require_same_shape(first, m, "probability_map");
        for (size_t i = 0; i < m.size(); ++i) map[i] += m.v[i];
    }
    const float inv = 1.0f / static_cast<float>(rater_masks.size());
    for (size_t i = 0; i < map.size(); ++i) map[i] *= inv;
    return map;
}

/// Indicator of probability band l out of L: l/L <= q < (l+1)/L, with the
/// top band closed at 1 so the bands partition [0,1].
inline Mask level_mask(const Tensor& q, int l, int L) {
    if (L < 1 || l < 0 || l >= L) throw std::out_of_range("level_mask: need 0 <= l < L");
    if (q.rank() != 2) throw std::invalid_argument("level_mask: expected a 2-d map");
    const double lo = static_cast<double>(l) / L;
    const double hi = static_cast<double>(l + 1) / L;
    const bool top = (l == L - 1);
    Mask out(q.dim(0), q.dim(1));
    for (size_t i = 0; i < q.size(); ++i) {
        const double v = q[i];
        out.v[i] = (v >= lo && (top ? v <= 1.0 : v < hi)) ? 1 : 0;
    }
    return out;
}

/// Dice overlap of two binary masks; two empty masks count as perfect
/// agreement.
inline double dice_binary(const Mask& a, const Mask& b) {
    require_same_shape(a, b, "dice_binary");
    size_t inter = 0, sa = 0, sb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        inter += static_cast<size_t>(a.v[i] & b.v[i]);
        sa += a.v[i];
        sb += b.v[i];
    }
    if (sa + sb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

/// Staged Dice: mean Dice over the L probability bands of both maps.
inline double q_score(const Tensor& pred, const Tensor& gt, int L) {
    if (!pred.same_shape(gt)) throw std::invalid_argument("q_score: map shape mismatch");
    double total = 0.0;
    for (int l = 0; l < L; ++l)
        total += dice_binary(level_mask(pred, l, L), level_mask(gt, l, L));
    return total / L;
}

/// d(a,b) = 1 - IoU(a,b); IoU of two empty masks is defined as 1 (d = 0).
inline double mask_distance(const Mask& a, const Mask& b) {
    require_same_shape(a, b, "mask_distance");
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        inter += static_cast<size_t>(a.v[i] & b.v[i]);
        uni += static_cast<size_t>(a.v[i] | b.v[i]);
    }
    if (uni == 0) return 0.0;
    return 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

namespace detail {

// Mean distance over all ordered cross pairs (identical indices included).
inline double mean_cross_distance(const SampleSet& a, const SampleSet& b) {
    double total = 0.0;
    for (const Mask& x : a)
        for (const Mask& y : b) total += mask_distance(x, y);
    return total / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

// Mean distance over ordered within-set pairs with i != j; 0 for a singleton.
inline double mean_within_distance(const SampleSet& s) {
    const size_t n = s.size();
    if (n < 2) return 0.0;
    double total = 0.0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            if (i != j) total += mask_distance(s[i], s[j]);
    return total / (static_cast<double>(n) * static_cast<double>(n - 1));
}

} // namespace detail

/// Generalized energy distance estimate 2 E[d(s,y)] - E[d(s,s')] - E[d(y,y')].
/// A finite-sample estimate, so it may be negative; reported as-is.
inline double ged(const SampleSet& pred, const SampleSet& gt) {
    require_nonempty(pred, "ged");
    require_nonempty(gt, "ged");
    return 2.0 * detail::mean_cross_distance(pred, gt)
           - detail::mean_within_distance(pred)
           - detail::mean_within_distance(gt);
}

/// Mean pairwise distance among predicted samples.
inline double diversity(const SampleSet& pred) {
    require_nonempty(pred, "diversity");
    return detail::mean_within_distance(pred);
}

/// 1 - mean distance between predicted and ground-truth samples.
inline double similarity(const SampleSet& pred, const SampleSet& gt) {
    require_nonempty(pred, "similarity");
    require_nonempty(gt, "similarity");
    return 1.0 - detail::mean_cross_distance(pred, gt);
}

/// Binary cross-entropy of prediction p against target t, with p clipped
/// away from {0,1}.
inline double binary_cross_entropy(double target, double pred, double eps = 1e-6) {
    const double p = std::min(std::max(pred, eps), 1.0 - eps);
    return -(target * std::log(p) + (1.0 - target) * std::log(1.0 - p));
}

/// Pixelwise mean cross-entropy over all (ground truth, prediction) pairs.
inline Tensor error_map(const SampleSet& gt_samples, const SampleSet& pred_samples) {
    require_nonempty(gt_samples, "error_map");
    require_nonempty(pred_samples, "error_map");
    const Mask& first = gt_samples.front();
    Tensor out({first.h, first.w});
    for (const Mask& y : gt_samples) {
        require_same_shape(first, y, "error_map");
        for (const Mask& s : pred_samples) {
            require_same_shape(first, s, "error_map");
            for (size_t i = 0; i < out.size(); ++i)
                out[i] += static_cast<float>(binary_cross_entropy(y.v[i], s.v[i]));
        }
    }
    const float inv = 1.0f / static_cast<float>(gt_samples.size() * pred_samples.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] *= inv;
    return out;
}

/// Pixelwise mean cross-entropy of each sample against the mean
/// prediction; visualizes the spread of the predicted distribution.
inline Tensor gamma_map(const SampleSet& pred_samples) {
    require_nonempty(pred_samples, "gamma_map");
    const Mask& first = pred_samples.front();
    Tensor mean_pred({first.h, first.w});
    for (const Mask& s : pred_samples) {
        require_same_shape(first, s, "gamma_map");
        for (size_t i = 0; i < mean_pred.size(); ++i) mean_pred[i] += s.v[i];
    }
    const float inv = 1.0f / static_cast<float>(pred_samples.size());
    for (size_t i = 0; i < mean_pred.size(); ++i) mean_pred[i] *= inv;

    Tensor out({first.h, first.w});
    for (const Mask& s : pred_samples)
        for (size_t i = 0; i < out.size(); ++i)
            out[i] += static_cast<float>(binary_cross_entropy(mean_pred[i], s.v[i]));
    for (size_t i = 0; i < out.size(); ++i) out[i] *= inv;
    return out;
}

struct CaseMetrics {
    std::string id;
    double q_score = 0.0;
    double ged = 0.0;
    double diversity = 0.0;
    double similarity = 0.0;
};

/// Aggregate report; the four headline numbers are the means of the
/// per-case entries.
struct MetricsReport {
    double q_score = 0.0;
    double ged = 0.0;
    double diversity = 0.0;
    double similarity = 0.0;
    std::vector<CaseMetrics> per_case;

    static MetricsReport aggregate(std::vector<CaseMetrics> cases) {
        if (cases.empty()) throw std::invalid_argument("MetricsReport: no cases");
        MetricsReport r;
        for (const CaseMetrics& c : cases) {
            r.q_score += c.q_score;
            r.ged += c.ged;
            r.diversity += c.diversity;
            r.similarity += c.similarity;
        }
        const double n = static_cast<double>(cases.size());
        r.q_score /= n;
        r.ged /= n;
        r.diversity /= n;
        r.similarity /= n;
        r.per_case = std::move(cases);
        return r;
    }
};

inline nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json per = nlohmann::json::array();
    for (const CaseMetrics& c : r.per_case) {
        per.push_back({{"id", c.id},
                       {"q_score", c.q_score},
                       {"ged", c.ged},
                       {"diversity", c.diversity},
                       {"similarity", c.similarity}});
    }
    return {{"q_score", r.q_score},
            {"ged", r.ged},
            {"diversity", r.diversity},
            {"similarity", r.similarity},
            {"per_case", per}};
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.q_score = j.at("q_score").get<double>();
    r.ged = j.at("ged").get<double>();
    r.diversity = j.at("diversity").get<double>();
    r.similarity = j.at("similarity").get<double>();
    for (const auto& c : j.at("per_case")) {
        CaseMetrics cm;
        cm.id = c.at("id").get<std::string>();
        cm.q_score = c.at("q_score").get<double>();
        cm.ged = c.at("ged").get<double>();
        cm.diversity = c.at("diversity").get<double>();
        cm.similarity = c.at("similarity").get<double>();
        r.per_case.push_back(std::move(cm));
    }
    return r;
}

} // namespace multirater
