#pragma once

#include <stdexcept>
#include <vector>

#include "multirater/data.hpp"
#include "multirater/metrics.hpp"
#include "multirater/network.hpp"
#include "multirater/rng.hpp"

namespace multirater {

/// Scores the model on a case list: per case, n_mc-draw inference, then
/// q_score of the fused map against the rater probability map, and
/// GED/diversity/similarity of the drawn samples against the rater masks.
inline MetricsReport evaluate(Model& model, const std::vector<MultiRaterCase>& cases, int n_mc,
                              int L, Rng& rng) {
    if (cases.empty()) throw std::invalid_argument("evaluate: no cases");
    std::vector<CaseMetrics> per_case;
    per_case.reserve(cases.size());
    for (const MultiRaterCase& c : cases) {
        if (c.rater_masks.empty())
            throw std::invalid_argument("evaluate: case " + c.case_id + " has no rater masks");
        PredictionSet ps = model.forward(c.image, rng, n_mc);
        const Tensor gt_map = probability_map(c.rater_masks);
        const SampleSet pred_samples = ps.all_samples();
        CaseMetrics cm;
        cm.id = c.case_id;
        cm.q_score = q_score(ps.fused, gt_map, L);
        cm.ged = ged(pred_samples, c.rater_masks);
        cm.diversity = diversity(pred_samples);
        cm.similarity = similarity(pred_samples, c.rater_masks);
        per_case.push_back(std::move(cm));
    }
    return MetricsReport::aggregate(std::move(per_case));
}

} // namespace multirater
