// SPDX-License-Identifier: Apache-2.0
#include "comodal/gradcheck_suite.hpp"

#include <functional>
#include <set>
#include <sstream>

#include "comodal/error.hpp"
#include "comodal/gradcheck.hpp"
#include "comodal/layers.hpp"
#include "comodal/model.hpp"
#include "comodal/objectives.hpp"
#include "comodal/random.hpp"

namespace comodal {

namespace {

struct CaseDef {
  std::string group;
  std::string name;
  std::function<GradCheckReport()> run;
};

// Values of magnitude in [0.2, 1] with random sign, away from every kink.
Tensor sample(Rng& rng, Shape shape, bool positive = false) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    x = rng.uniform(0.2, 1.0);
    if (!positive && rng.uniform() < 0.5) x = -x;
  }
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor leaf(Rng& rng, Shape shape, bool positive = false) {
  Tensor t = sample(rng, std::move(shape), positive);
  return Tensor::from(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true);
}

// Random weighted sum, so no output element's gradient is degenerate.
std::function<Tensor(const Tensor&)> probe(Rng& rng, const Shape& shape) {
  Tensor w = sample(rng, shape);
  return [w](const Tensor& y) { return sum(mul(y, w)); };
}

GradCheckReport unary(std::uint64_t seed, Shape in, Shape out,
             const std::function<Tensor(const Tensor&)>& op, bool positive = false) {
  Rng rng(seed);
  const Tensor x = sample(rng, std::move(in), positive);
  const auto p = probe(rng, out);
  return finite_diff_check([&](const Tensor& t) { return p(op(t)); }, x);
}

GradCheckReport multi(std::vector<Tensor> params, Shape out,
             const std::function<Tensor(const std::vector<Tensor>&)>& op, Rng& rng) {
  const auto p = probe(rng, out);
  return finite_diff_check_params([&] { return p(op(params)); }, params);
}

GradCheckReport layer_check(ParamList params, std::uint64_t seed, const std::function<Tensor()>& loss) {
  Rng rng(seed);
  init_params(params, seed);
  std::vector<Tensor> tensors;
  for (auto& p : params) {
    auto v = p.tensor.mutable_data();
    // Perturb biases and gains away from their constant initial values.
    for (auto& x : v) x += rng.uniform(-0.3, 0.3);
    tensors.push_back(p.tensor);
  }
  return finite_diff_check_params(loss, tensors);
}

ModelConfig tiny_model(TaskKind kind, bool attention_tail) {
  ModelConfig c;
  c.task.kind = kind;
  c.task.classes = 3;
  c.stack = StackConfig{4, 2, 1, 1, 6};
  for (const char* name : {"a", "b"}) {
    ModalitySpec m;
    m.name = name;
    m.input = InputSpec{2, 3, {2}};
    StageSpec pool;
    pool.kind = StageKind::spatial_pool;
    StageSpec conv;
    conv.kind = StageKind::conv1d;
    conv.out = 3;
    StageSpec widen;
    widen.kind = StageKind::pointwise;
    widen.out = 4;
    m.stages = {pool, conv, widen};
    m.attach_after = 2;
    if (attention_tail) {
      StageSpec att;
      att.kind = StageKind::self_attention;
      att.heads = 2;
      att.ffn_hidden = 4;
      m.stages.push_back(att);
    }
    c.modalities.push_back(m);
  }
  return c;
}

GradCheckReport total_loss_check(KtMode mode, TaskKind kind, std::uint64_t seed) {
  ModelConfig config = tiny_model(kind, mode == KtMode::attention);
  config.kt_projector = mode == KtMode::feature;
  CoTrainModel model(config);
  model.initialize(seed);
  Rng rng(seed ^ 0x5eedULL);
  for (const auto& e : model.parameters()) {
    Tensor t = e.ref.tensor;
    for (auto& x : t.mutable_data()) x += rng.uniform(-0.1, 0.1);
  }
  MultimodalBatch batch;
  const std::size_t b = 3;
  for (const auto& m : config.modalities) {
    Shape shape{b};
    for (auto d : m.input.shape()) shape.push_back(d);
    batch.inputs[m.name] = sample(rng, shape);
  }
  for (std::size_t i = 0; i < b; ++i) {
    batch.labels.push_back(static_cast<int>(rng.below(config.task.classes)));
    batch.targets.push_back(rng.uniform(-2.0, 2.0));
  }
  const LossWeights weights{0.7, 1.3, 0.9, 2.0};

  BranchOutputs frozen;
  {
    NoGradGuard no_grad;
    frozen = model.forward_all(batch, ForwardMode::cotrain);
  }
  auto analytic = [&] {
    return total_loss(model, model.forward_all(batch, ForwardMode::cotrain), batch, weights, mode)
        .value;
  };
  // Same objective with the teacher held at its base-point values.
  auto surrogate = [&] {
    const BranchOutputs out = model.forward_all(batch, ForwardMode::cotrain);
    Tensor kt, task_sum;
    for (const auto& name : model.modalities()) {
      const UnimodalOutputs& uni = out.uni.at(name);
      Tensor term;
      if (mode == KtMode::decision) {
        term = kt_decision(uni.kt_pred, frozen.mm_pred, weights.temperature);
      } else if (mode == KtMode::feature) {
        term = kt_feature(uni.kt_feat, frozen.mm_feat, model.kt_projector(name));
      } else {
        term = kt_attention(uni.kt_attn, frozen.mm_attn.at(name));
      }
      kt = kt.defined() ? add(kt, term) : term;
      const Tensor task = task_loss(uni.pred, batch, config.task);
      task_sum = task_sum.defined() ? add(task_sum, task) : task;
    }
    return add(add(scale(kt, weights.alpha), scale(task_sum, weights.beta)),
               scale(task_loss(out.mm_pred, batch, config.task), weights.gamma));
  };
  std::vector<Tensor> params;
  for (const auto& e : model.parameters()) params.push_back(e.ref.tensor);
  const GradCheckReport err = finite_diff_check_params(analytic, surrogate, params);
  model.zero_grad();
  return err;
}

std::vector<CaseDef> all_cases() {
  std::vector<CaseDef> cases;
  auto op = [&](std::string name, std::function<GradCheckReport()> run) {
    cases.push_back({"ops", std::move(name), std::move(run)});
  };
  auto layer = [&](std::string name, std::function<GradCheckReport()> run) {
    cases.push_back({"layers", std::move(name), std::move(run)});
  };
  auto loss = [&](std::string name, std::function<GradCheckReport()> run) {
    cases.push_back({"losses", std::move(name), std::move(run)});
  };

  auto binary = [](std::uint64_t seed, const std::function<Tensor(const Tensor&, const Tensor&)>& f,
                   bool positive_b = false) {
    Rng rng(seed);
    std::vector<Tensor> p{leaf(rng, {3, 4}), leaf(rng, {3, 4}, positive_b)};
    return multi(p, {3, 4}, [&](const std::vector<Tensor>& t) { return f(t[0], t[1]); }, rng);
  };
  op("add", [=] { return binary(1, [](auto& a, auto& b) { return add(a, b); }); });
  op("sub", [=] { return binary(2, [](auto& a, auto& b) { return sub(a, b); }); });
  op("mul", [=] { return binary(3, [](auto& a, auto& b) { return mul(a, b); }); });
  op("div", [=] { return binary(4, [](auto& a, auto& b) { return div(a, b); }, true); });
  op("add_bias", [] {
    Rng rng(5);
    std::vector<Tensor> p{leaf(rng, {2, 3, 4}), leaf(rng, {4})};
    return multi(p, {2, 3, 4}, [](auto& t) { return add_bias(t[0], t[1]); }, rng);
  });
  op("scale", [] { return unary(6, {3, 4}, {3, 4}, [](auto& x) { return scale(x, -1.7); }); });
  op("add_scalar",
     [] { return unary(7, {3, 4}, {3, 4}, [](auto& x) { return add_scalar(x, 0.3); }); });
  op("neg", [] { return unary(8, {3, 4}, {3, 4}, [](auto& x) { return neg(x); }); });
  op("exp", [] { return unary(9, {3, 4}, {3, 4}, [](auto& x) { return exp(x); }); });
  op("log", [] { return unary(10, {3, 4}, {3, 4}, [](auto& x) { return log(x); }, true); });
  op("log_clamped", [] {
    return unary(11, {3, 4}, {3, 4}, [](auto& x) { return log_clamped(x, 1e-8); }, true);
  });
  op("abs", [] { return unary(12, {3, 4}, {3, 4}, [](auto& x) { return abs(x); }); });
  op("relu", [] { return unary(13, {3, 4}, {3, 4}, [](auto& x) { return relu(x); }); });
  op("tanh", [] { return unary(14, {3, 4}, {3, 4}, [](auto& x) { return tanh(x); }); });
  op("matmul", [] {
    Rng rng(15);
    std::vector<Tensor> p{leaf(rng, {3, 4}), leaf(rng, {4, 2})};
    return multi(p, {3, 2}, [](auto& t) { return matmul(t[0], t[1]); }, rng);
  });
  op("matmul_batched", [] {
    Rng rng(16);
    std::vector<Tensor> p{leaf(rng, {2, 3, 4}), leaf(rng, {2, 4, 2})};
    return multi(p, {2, 3, 2}, [](auto& t) { return matmul(t[0], t[1]); }, rng);
  });
  op("permute", [] {
    return unary(17, {2, 3, 4}, {4, 2, 3}, [](auto& x) { return permute(x, {2, 0, 1}); });
  });
  op("transpose",
     [] { return unary(18, {2, 3, 4}, {2, 4, 3}, [](auto& x) { return transpose(x); }); });
  op("reshape",
     [] { return unary(19, {2, 3, 4}, {6, 4}, [](auto& x) { return reshape(x, {6, 4}); }); });
  op("concat", [] {
    Rng rng(20);
    std::vector<Tensor> p{leaf(rng, {2, 3, 2}), leaf(rng, {2, 1, 2})};
    return multi(p, {2, 4, 2}, [](auto& t) { return concat({t[0], t[1]}, 1); }, rng);
  });
  op("slice", [] {
    return unary(21, {2, 5, 3}, {2, 2, 3}, [](auto& x) { return slice(x, 1, 2, 2); });
  });
  op("sum", [] { return unary(22, {3, 4}, {}, [](auto& x) { return sum(x); }); });
  op("mean", [] { return unary(23, {3, 4}, {}, [](auto& x) { return mean(x); }); });
  op("sum_axes", [] {
    return unary(24, {2, 3, 4}, {3}, [](auto& x) { return sum_axes(x, {0, 2}); });
  });
  op("mean_pool", [] {
    return unary(25, {2, 3, 4, 2}, {2, 3}, [](auto& x) { return mean_pool(x, {2, 3}); });
  });
  op("softmax_t", [] {
    return unary(26, {2, 3, 4}, {2, 3, 4}, [](auto& x) { return softmax_t(x, 1, 2.5); });
  });
  op("log_softmax_t", [] {
    return unary(27, {3, 5}, {3, 5}, [](auto& x) { return log_softmax_t(x, 1, 0.7); });
  });
  op("layer_norm", [] {
    Rng rng(28);
    std::vector<Tensor> p{leaf(rng, {2, 3, 5}), leaf(rng, {5}), leaf(rng, {5})};
    return multi(p, {2, 3, 5}, [](auto& t) { return layer_norm(t[0], t[1], t[2]); }, rng);
  });
  op("conv1d", [] {
    Rng rng(29);
    std::vector<Tensor> p{leaf(rng, {2, 7}), leaf(rng, {3, 2, 3}), leaf(rng, {3})};
    return multi(p, {3, 4}, [](auto& t) { return conv1d(t[0], t[1], t[2], 2, 1); }, rng);
  });
  op("conv1d_batched", [] {
    Rng rng(30);
    std::vector<Tensor> p{leaf(rng, {2, 2, 5}), leaf(rng, {3, 2, 2}), leaf(rng, {3})};
    return multi(p, {2, 3, 4}, [](auto& t) { return conv1d(t[0], t[1], t[2], 1, 0); }, rng);
  });
  op("row_cosine", [] {
    Rng rng(31);
    std::vector<Tensor> p{leaf(rng, {3, 4}), leaf(rng, {3, 4})};
    return multi(p, {3}, [](auto& t) { return row_cosine(t[0], t[1], 1e-8); }, rng);
  });
  op("pick", [] {
    const std::vector<int> labels{2, 0, 3};
    return unary(32, {3, 4}, {3}, [labels](auto& x) { return pick(x, labels); });
  });

  layer("linear", [] {
    LinearLayer l(4, 3);
    ParamList params;
    l.collect("l", params);
    Rng rng(40);
    const Tensor x = sample(rng, {2, 5, 4});
    const auto p = probe(rng, {2, 5, 3});
    return layer_check(params, 40, [&] { return p(l.forward(x)); });
  });
  layer("conv1d", [] {
    Conv1dLayer l(2, 3, 3, 1, 1);
    ParamList params;
    l.collect("c", params);
    Rng rng(41);
    const Tensor x = sample(rng, {2, 2, 5});
    const auto p = probe(rng, {2, 3, 5});
    return layer_check(params, 41, [&] { return p(l.forward(x)); });
  });
  layer("layer_norm", [] {
    LayerNorm l(5);
    ParamList params;
    l.collect("n", params);
    Rng rng(42);
    const Tensor x = sample(rng, {3, 5});
    const auto p = probe(rng, {3, 5});
    return layer_check(params, 42, [&] { return p(l.forward(x)); });
  });
  layer("feed_forward", [] {
    FeedForward l(4, 6);
    ParamList params;
    l.collect("f", params);
    Rng rng(43);
    const Tensor x = sample(rng, {2, 3, 4});
    const auto p = probe(rng, {2, 3, 4});
    return layer_check(params, 43, [&] { return p(l.forward(x)); });
  });
  layer("cross_attention", [] {
    AttentionBlock block(4, 2);
    ParamList params;
    block.collect("x", params);
    Rng rng(44);
    Tensor qa = leaf(rng, {2, 3, 4});
    Tensor kb = leaf(rng, {2, 5, 4});
    const auto p = probe(rng, {2, 3, 4});
    init_params(params, 44);
    std::vector<Tensor> tensors{qa, kb};
    for (auto& r : params) tensors.push_back(r.tensor);
    return finite_diff_check_params([&] { return p(cross_attention(qa, kb, block)); }, tensors);
  });
  layer("self_attention", [] {
    AttentionBlock block(4, 1);
    ParamList params;
    block.collect("s", params);
    Rng rng(45);
    Tensor x = leaf(rng, {4, 4});
    const auto p = probe(rng, {4, 4});
    init_params(params, 45);
    std::vector<Tensor> tensors{x};
    for (auto& r : params) tensors.push_back(r.tensor);
    return finite_diff_check_params([&] { return p(self_attention(x, block)); }, tensors);
  });
  layer("attention_layer", [] {
    AttentionLayer l(4, 2, 6, false);
    ParamList params;
    l.collect("t", params);
    Rng rng(46);
    const Tensor q = sample(rng, {2, 3, 4});
    const Tensor c = sample(rng, {2, 4, 4});
    const auto p = probe(rng, {2, 3, 4});
    return layer_check(params, 46, [&] { return p(l.forward(q, c)); });
  });
  layer("transformer_stack", [] {
    TransformerStack stack({"a", "b", "c"}, StackConfig{4, 2, 1, 1, 5});
    ParamList params;
    stack.collect("mm", params);
    Rng rng(47);
    std::map<std::string, Tensor> tokens{
        {"a", sample(rng, {2, 3, 4})}, {"b", sample(rng, {2, 2, 4})}, {"c", sample(rng, {2, 3, 4})}};
    const auto pa = probe(rng, {2, 3, 4});
    const auto pb = probe(rng, {2, 2, 4});
    const auto pc = probe(rng, {2, 3, 4});
    return layer_check(params, 47, [&] {
      const StackOutputs out = stack.forward(tokens);
      return add(add(pa(out.fused.at("a")), pb(out.fused.at("b"))), pc(out.fused.at("c")));
    });
  });

  loss("task_classification", [] {
    const std::vector<int> labels{1, 0, 2};
    return unary(50, {3, 3}, {}, [labels](auto& x) { return task_loss_classification(x, labels); });
  });
  loss("task_regression", [] {
    Rng rng(51);
    const Tensor pred = sample(rng, {4, 1});
    std::vector<double> target;
    for (std::size_t i = 0; i < 4; ++i) {
      target.push_back(pred.data()[i] + (i % 2 ? 0.5 : -0.5));
    }
    return finite_diff_check([&](const Tensor& x) { return task_loss_regression(x, target); },
                             pred);
  });
  loss("kt_decision", [] {
    Rng rng(52);
    std::vector<Tensor> p{leaf(rng, {3, 4}), leaf(rng, {3, 4})};
    // The teacher input is detached, so only the student is checked.
    std::vector<Tensor> student{p[0]};
    return finite_diff_check_params([&] { return kt_decision(p[0], p[1], 5.0); }, student);
  });
  loss("kt_feature", [] {
    Rng rng(53);
    LinearLayer proj(3, 4);
    ParamList params;
    proj.collect("p", params);
    init_params(params, 53);
    Tensor s = leaf(rng, {3, 3});
    const Tensor t = sample(rng, {3, 4});
    std::vector<Tensor> tensors{s, proj.weight, proj.bias};
    return finite_diff_check_params([&] { return kt_feature(s, t, proj); }, tensors);
  });
  loss("kt_attention", [] {
    Rng rng(54);
    const Tensor zs = sample(rng, {2, 2, 3, 4});
    const Tensor teacher = softmax_t(sample(rng, {2, 2, 3, 4}), 3, 1.0);
    return finite_diff_check(
        [&](const Tensor& z) { return kt_attention(softmax_t(z, 3, 1.0), teacher); }, zs);
  });
  loss("total_loss_decision",
       [] { return total_loss_check(KtMode::decision, TaskKind::classification, 60); });
  loss("total_loss_feature",
       [] { return total_loss_check(KtMode::feature, TaskKind::classification, 61); });
  loss("total_loss_attention",
       [] { return total_loss_check(KtMode::attention, TaskKind::classification, 62); });
  loss("total_loss_regression",
       [] { return total_loss_check(KtMode::feature, TaskKind::regression, 63); });
  return cases;
}

}  // namespace

std::vector<std::string> gradcheck_case_names() {
  std::vector<std::string> names;
  for (const auto& c : all_cases()) names.push_back(c.group + "." + c.name);
  return names;
}

std::vector<GradCheckCase> run_gradcheck_suite(const std::string& filter) {
  const auto cases = all_cases();
  std::set<std::string> wanted;
  if (filter != "all") {
    std::stringstream ss(filter);
    std::string item;
    while (std::getline(ss, item, ',')) {
      bool known = false;
      for (const auto& c : cases) {
        known = known || item == c.group || item == c.group + "." + c.name || item == c.name;
      }
      if (!known) throw LookupError("unknown gradcheck case '" + item + "'");
      wanted.insert(item);
    }
  }
  std::vector<GradCheckCase> out;
  for (const auto& c : cases) {
    if (!wanted.empty() && !wanted.count(c.group) && !wanted.count(c.name) &&
        !wanted.count(c.group + "." + c.name)) {
      continue;
    }
    const GradCheckReport r = c.run();
    out.push_back({c.group, c.name, r.max_error, r.checked, r.nonsmooth});
  }
  return out;
}

}  // namespace comodal
