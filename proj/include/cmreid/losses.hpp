#pragma once

// Angular ranking losses, cross-modality distillation and identity loss.
//
// Batched forms take (N, D) matrices whose row i belongs to tuple i; every
// batch average divides by the number of tuples N.

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cmreid/autodiff.hpp"
#include "cmreid/error.hpp"
#include "cmreid/tensor.hpp"
#include "cmreid/types.hpp"

namespace cmreid {

enum class Role { anchor, positive, negative };

enum class RankingLoss {
    enumerate_angular,   // exponential bi-directional enumeration plus compactness
    euclidean_triplet,   // margin triplet on Euclidean distance over the same enumeration
};

inline const char* to_string(RankingLoss r) {
    return r == RankingLoss::enumerate_angular ? "eat" : "euclidean-triplet";
}

inline RankingLoss parse_ranking_loss(const std::string& s) {
    if (s == "eat" || s == "enumerate-angular") return RankingLoss::enumerate_angular;
    if (s == "euclidean-triplet" || s == "triplet") return RankingLoss::euclidean_triplet;
    throw ParameterError("unknown ranking loss '" + s + "'");
}

struct LossConfig {
    double margin = 0.3;
    bool compactness = true;
    /// Negates the compactness exponent: exp(-scos) instead of exp(scos).
    bool compactness_negated = false;
    double label_smoothing = 0.1;
    RankingLoss ranking = RankingLoss::enumerate_angular;
    double weight_rank = 1.0;
    double weight_cmkd = 1.0;
    double weight_id = 1.0;

    void validate() const {
        if (!(margin >= 0.0)) throw ParameterError("loss margin must be >= 0");
        if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
            throw ParameterError("label smoothing must lie in [0, 1)");
        }
        for (double w : {weight_rank, weight_cmkd, weight_id}) {
            if (!(w >= 0.0) || !std::isfinite(w)) throw ParameterError("loss term weights must be finite and >= 0");
        }
    }
};

/// Embeddings of one mini-batch: every (role, modality) slot is an (N, D)
/// matrix.
struct TupleEmbeddings {
    std::array<std::array<ad::Var, 2>, 3> slots;

    ad::Var& at(Role r, Modality m) { return slots[static_cast<std::size_t>(r)][index_of(m)]; }
    const ad::Var& at(Role r, Modality m) const { return slots[static_cast<std::size_t>(r)][index_of(m)]; }

    std::size_t tuples() const { return at(Role::anchor, Modality::visible).shape()[0]; }

    void validate() const {
        for (const auto& role : slots) {
            for (const ad::Var& v : role) {
                if (!v.valid()) throw BatchStructureError("tuple batch is missing a role/modality slot");
            }
        }
        const Shape& ref = at(Role::anchor, Modality::visible).shape();
        if (ref.size() != 2) throw BatchStructureError("tuple embeddings must be (N, D) matrices");
        for (const auto& role : slots) {
            for (const ad::Var& v : role) {
                if (v.shape() != ref) {
                    throw BatchStructureError("tuple slot shape " + shape_string(v.shape()) + " differs from " +
                                              shape_string(ref));
                }
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Building blocks.

/// (1/N) sum |rgb_a - ir_p|^2 + |ir_a - rgb_p|^2.
inline ad::Var cmkd_loss(ad::Var rgb_anchor, ad::Var ir_positive, ad::Var ir_anchor, ad::Var rgb_positive) {
    return ad::add(ad::mean(ad::row_sqdist(rgb_anchor, ir_positive)), ad::mean(ad::row_sqdist(ir_anchor, rgb_positive)));
}

/// Batch mean of [cos(a, n) - cos(a, p) + margin]_+.
inline ad::Var cos_margin_triplet(ad::Var anchor, ad::Var positive, ad::Var negative, double margin) {
    const ad::Var gap = ad::sub(ad::row_cosine(anchor, negative), ad::row_cosine(anchor, positive));
    return ad::mean(ad::clamp_nonneg(ad::add_scalar(gap, margin)));
}

/// Per-row [cos(a, n)]_+ - [cos(a, p)]_+ + 1, each in [0, 2].
inline ad::Var angular_terms(ad::Var anchor, ad::Var positive, ad::Var negative) {
    return ad::add_scalar(ad::sub(ad::clamp_nonneg(ad::row_cosine(anchor, negative)),
                                  ad::clamp_nonneg(ad::row_cosine(anchor, positive))),
                          1.0);
}

/// Batch mean of the angular terms (margin fixed at 1).
inline ad::Var at_triplet(ad::Var anchor, ad::Var positive, ad::Var negative) {
    return ad::mean(angular_terms(anchor, positive, negative));
}

struct DirectionalTerms {
    ad::Var cross;  // (N) angular terms against the other modality's negative
    ad::Var same;   // (N) angular terms against the anchor modality's negative
    ad::Var value;  // mean exp(cross) + mean exp(same)
};

/// Exponential enumeration for anchors of one modality. The positive always
/// comes from the other modality; negatives come from both.
inline DirectionalTerms eat_directional_terms(const TupleEmbeddings& batch, Modality anchor_modality) {
    batch.validate();
    const Modality o = other(anchor_modality);
    const ad::Var a = batch.at(Role::anchor, anchor_modality);
    const ad::Var p = batch.at(Role::positive, o);
    DirectionalTerms t;
    t.cross = angular_terms(a, p, batch.at(Role::negative, o));
    t.same = angular_terms(a, p, batch.at(Role::negative, anchor_modality));
    t.value = ad::add(ad::mean(ad::exp(t.cross)), ad::mean(ad::exp(t.same)));
    return t;
}

inline ad::Var eat_directional(const TupleEmbeddings& batch, Modality anchor_modality) {
    return eat_directional_terms(batch, anchor_modality).value;
}

/// Sum over anchors and elements of exp(scos(f_r, mean f)) for both anchor
/// modalities; scos is cosine similarity restricted to scalars.
inline ad::Var compactness(ad::Var rgb_anchor, ad::Var ir_anchor, bool negated = false) {
    auto term = [negated](ad::Var f) {
        if (f.shape().size() == 1) f = ad::reshape(f, {1, f.shape()[0]});
        const std::size_t length = f.shape()[1];
        const ad::Var centre = ad::expand_last(ad::mean_last(f), length);
        const ad::Var s = ad::scalar_cos(f, centre);
        return ad::sum(ad::exp(negated ? ad::scale(s, -1.0) : s));
    };
    return ad::add(term(rgb_anchor), term(ir_anchor));
}

/// Directional EAT sums plus (optionally) the compactness term.
inline ad::Var eat_loss(const TupleEmbeddings& batch, const LossConfig& cfg) {
    ad::Var total = ad::add(eat_directional(batch, Modality::visible), eat_directional(batch, Modality::infrared));
    if (cfg.compactness) {
        total = ad::add(total, compactness(batch.at(Role::anchor, Modality::visible),
                                           batch.at(Role::anchor, Modality::infrared), cfg.compactness_negated));
    }
    return total;
}

/// Margin triplet on Euclidean distances over the same cross/same-modality
/// enumeration as EAT; the baseline ranking loss.
inline ad::Var euclidean_triplet(const TupleEmbeddings& batch, double margin) {
    batch.validate();
    ad::Var total;
    for (Modality m : kModalities) {
        const Modality o = other(m);
        const ad::Var a = batch.at(Role::anchor, m);
        const ad::Var dp = ad::row_distance(a, batch.at(Role::positive, o));
        for (Modality neg : {o, m}) {
            const ad::Var dn = ad::row_distance(a, batch.at(Role::negative, neg));
            const ad::Var term = ad::mean(ad::clamp_nonneg(ad::add_scalar(ad::sub(dp, dn), margin)));
            total = total.valid() ? ad::add(total, term) : term;
        }
    }
    return total;
}

/// Label-smoothed cross entropy averaged over rows of (M, K) logits:
/// q_true = 1 - eps + eps/K, q_other = eps/K.
inline ad::Var id_loss(ad::Var logits, std::span<const std::size_t> labels, double smoothing) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw DimensionError("id_loss: logits must be (samples, classes), got " + shape_string(s));
    const std::size_t rows = s[0], classes = s[1];
    if (classes < 2) throw ParameterError("id_loss: need at least 2 classes");
    if (labels.size() != rows) throw DimensionError("id_loss: one label per logits row required");
    if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ParameterError("id_loss: smoothing must lie in [0, 1)");
    const double off = smoothing / static_cast<double>(classes);
    std::vector<double> target(rows * classes, off);
    for (std::size_t i = 0; i < rows; ++i) {
        if (labels[i] >= classes) {
            throw ParameterError("id_loss: label " + std::to_string(labels[i]) + " outside [0, " +
                                 std::to_string(classes) + ")");
        }
        target[i * classes + labels[i]] = 1.0 - smoothing + off;
    }
    ad::Tape& tape = *logits.tape();
    const ad::Var q = tape.constant(Tensor(s, std::move(target)));
    return ad::scale(ad::sum(ad::mul(q, ad::log_softmax_last(logits))), -1.0 / static_cast<double>(rows));
}

// ---------------------------------------------------------------------------
// Full objective.

struct LossBreakdown {
    double cmkd = 0.0;
    double cos = 0.0;   // margin cosine triplet, averaged over both anchor modalities
    double at = 0.0;    // (crgb + cir) / 2
    double crgb = 0.0;
    double cir = 0.0;
    double srgb = 0.0;
    double sir = 0.0;
    double eat_rgb = 0.0;
    double eat_ir = 0.0;
    double compactness = 0.0;
    double eat = 0.0;
    double triplet = 0.0;  // Euclidean baseline ranking loss
    double id = 0.0;
    double total = 0.0;
    ad::Var objective;  // weighted total on the tape; call backward on it

    static constexpr std::array<const char*, 14> kColumns{"cmkd", "cos",    "at",      "crgb",  "cir",
                                                          "srgb", "sir",    "eat_rgb", "eat_ir", "compactness",
                                                          "eat",  "triplet", "id",     "total"};

    std::array<double, 14> values() const {
        return {cmkd, cos, at, crgb, cir, srgb, sir, eat_rgb, eat_ir, compactness, eat, triplet, id, total};
    }
};

/// Inputs to the distillation term: GeM-pooled outputs of the private stages.
struct PrivateFeatures {
    ad::Var rgb_anchor;
    ad::Var rgb_positive;
    ad::Var ir_anchor;
    ad::Var ir_positive;
};

/// L_ALL = w_rank * ranking + w_cmkd * CMKD + w_id * ID, where the ranking
/// term is EAT (with compactness when enabled) or the Euclidean baseline.
/// Every component is reported unweighted; zero-weight terms stay off the
/// objective.
inline LossBreakdown total_loss(const TupleEmbeddings& batch, const PrivateFeatures& priv, ad::Var logits,
                                std::span<const std::size_t> labels, const LossConfig& cfg) {
    cfg.validate();
    batch.validate();
    LossBreakdown out;
    const ad::Var rgb_a = batch.at(Role::anchor, Modality::visible);
    const ad::Var ir_a = batch.at(Role::anchor, Modality::infrared);

    const auto rgb = eat_directional_terms(batch, Modality::visible);
    const auto ir = eat_directional_terms(batch, Modality::infrared);
    out.crgb = ad::mean(rgb.cross).item();
    out.srgb = ad::mean(rgb.same).item();
    out.cir = ad::mean(ir.cross).item();
    out.sir = ad::mean(ir.same).item();
    out.at = 0.5 * (out.crgb + out.cir);
    out.eat_rgb = rgb.value.item();
    out.eat_ir = ir.value.item();
    out.cos = 0.5 * (cos_margin_triplet(rgb_a, batch.at(Role::positive, Modality::infrared),
                                        batch.at(Role::negative, Modality::infrared), cfg.margin)
                         .item() +
                     cos_margin_triplet(ir_a, batch.at(Role::positive, Modality::visible),
                                        batch.at(Role::negative, Modality::visible), cfg.margin)
                         .item());

    ad::Var eat = ad::add(rgb.value, ir.value);
    if (cfg.compactness) {
        const ad::Var c = compactness(rgb_a, ir_a, cfg.compactness_negated);
        out.compactness = c.item();
        eat = ad::add(eat, c);
    }
    out.eat = eat.item();
    const ad::Var triplet = euclidean_triplet(batch, cfg.margin);
    out.triplet = triplet.item();
    const ad::Var cmkd = cmkd_loss(priv.rgb_anchor, priv.ir_positive, priv.ir_anchor, priv.rgb_positive);
    out.cmkd = cmkd.item();
    const ad::Var id = id_loss(logits, labels, cfg.label_smoothing);
    out.id = id.item();

    const ad::Var ranking = cfg.ranking == RankingLoss::enumerate_angular ? eat : triplet;
    std::vector<ad::Var> terms;
    for (auto [w, v] : {std::pair{cfg.weight_rank, ranking}, std::pair{cfg.weight_cmkd, cmkd}, std::pair{cfg.weight_id, id}}) {
        if (w == 0.0) continue;
        terms.push_back(w == 1.0 ? v : ad::scale(v, w));
    }
    if (terms.empty()) {
        out.objective = logits.tape()->constant(Tensor::scalar(0.0));
    } else {
        out.objective = terms.front();
        for (std::size_t i = 1; i < terms.size(); ++i) out.objective = ad::add(out.objective, terms[i]);
    }
    out.total = out.objective.item();
    return out;
}

// ---------------------------------------------------------------------------
// Value-level conveniences over single rows.

struct CmkdTuple {
    Tensor rgb_anchor;
    Tensor ir_positive;
    Tensor ir_anchor;
    Tensor rgb_positive;
};

inline Tensor stack_rows(std::span<const Tensor> rows) {
    if (rows.empty()) throw ParameterError("empty batch");
    const std::size_t d = rows.front().size();
    std::vector<double> out;
    out.reserve(rows.size() * d);
    for (const Tensor& r : rows) {
        if (r.size() != d) throw DimensionError("rows of unequal length in batch");
        out.insert(out.end(), r.values().begin(), r.values().end());
    }
    return Tensor(Shape{rows.size(), d}, std::move(out));
}

inline double cmkd_loss(std::span<const CmkdTuple> batch) {
    if (batch.empty()) throw ParameterError("cmkd_loss: empty batch");
    std::vector<Tensor> ra, ip, ia, rp;
    for (const CmkdTuple& t : batch) {
        ra.push_back(t.rgb_anchor);
        ip.push_back(t.ir_positive);
        ia.push_back(t.ir_anchor);
        rp.push_back(t.rgb_positive);
    }
    ad::Tape tape;
    return cmkd_loss(tape.constant(stack_rows(ra)), tape.constant(stack_rows(ip)), tape.constant(stack_rows(ia)),
                     tape.constant(stack_rows(rp)))
        .item();
}

inline double cos_margin_triplet(const Tensor& a, const Tensor& p, const Tensor& n, double margin) {
    ad::Tape tape;
    return cos_margin_triplet(tape.constant(a), tape.constant(p), tape.constant(n), margin).item();
}

inline double at_triplet(const Tensor& a, const Tensor& p, const Tensor& n) {
    ad::Tape tape;
    return at_triplet(tape.constant(a), tape.constant(p), tape.constant(n)).item();
}

inline double id_loss(const Tensor& logits, std::size_t label, double smoothing) {
    ad::Tape tape;
    const std::size_t k = logits.size();
    const std::array<std::size_t, 1> labels{label};
    return id_loss(tape.constant(logits.reshaped({1, k})), labels, smoothing).item();
}

}  // namespace cmreid
