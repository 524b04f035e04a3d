#pragma once

// Receiver-level execution of the graph. A pass walks the receivers in
// topological order; the caller decides what each receiver reads, which is
// how clean, patched, steered and perturbed passes share one implementation.

#include "vitcd/kernels.hpp"
#include "vitcd/metric.hpp"
#include "vitcd/model.hpp"

#include <functional>
#include <vector>

namespace vitcd {

struct ReceiverTape {
  kernels::LayerNormCache<Scalar> norm;
  Field normed;
  std::vector<Field> query, key, value, probs;  // attention receivers
  Field pre_activation;                         // mlp receivers
};

struct PassState {
  std::vector<Field> live;  // sender outputs produced during this pass
  Vector logits;
};

/// Runs receiver `r` on `input`, writing its senders' outputs into `state`.
void evaluate_receiver(const Model& model, int r, const Field& input, PassState& state,
                       ReceiverTape* tape = nullptr);

/// Gradient w.r.t. the receiver input, given the gradient w.r.t. each of its
/// sender outputs (all senders of one receiver share it) or w.r.t. the logits.
Field receiver_backward(const Model& model, int r, const ReceiverTape& tape,
                        const Field& grad_sender_output, const Vector& grad_logits);

/// Plain sum of the live contributions a receiver reads.
Field sum_live(const Graph& g, int r, const std::vector<Field>& live);

/// Fresh pass state with the input sender set and everything else empty.
PassState start_pass(const Model& model, const Field& embedded);

/// Evaluates receivers [first, R) with `input_for(r, state)` supplying inputs.
template <class InputFn>
void run_receivers(const Model& model, PassState& state, int first, InputFn&& input_for,
                   std::vector<ReceiverTape>* tapes = nullptr) {
  const int count = static_cast<int>(model.graph().receivers().size());
  for (int r = first; r < count; ++r) {
    Field in = input_for(r, static_cast<const PassState&>(state));
    evaluate_receiver(model, r, in, state, tapes ? &(*tapes)[r] : nullptr);
  }
}

/// d metric / d receiver input for every receiver, from a full unpatched pass
/// on `embedded`. `reference_logits` anchors the metric (the clean run).
std::vector<Field> receiver_input_gradients(const Model& model, const Field& embedded,
                                            const MetricSpec& metric,
                                            const Vector& reference_logits, int label,
                                            Vector* logits_out = nullptr);

/// Throws NumericError naming `component` on the first non-finite entry.
void check_finite(const Field& m, const std::string& component);
void check_finite(const Vector& v, const std::string& component);

}  // namespace vitcd
