#include "mixem/forward_op.hpp"

#include <algorithm>
#include <cmath>

namespace mixem {

void Box::validate() const {
  if (lo.size() == 0 || lo.size() != hi.size()) {
    throw std::invalid_argument("box bounds must be non-empty and of equal length");
  }
  for (Index i = 0; i < lo.size(); ++i) {
    if (!(lo(i) < hi(i)) || !std::isfinite(lo(i)) || !std::isfinite(hi(i))) {
      throw std::invalid_argument("box requires finite lo < hi in every coordinate");
    }
  }
}

Box Box::cube(Index d, double lo, double hi) {
  Box b{Vec::Constant(d, lo), Vec::Constant(d, hi)};
  b.validate();
  return b;
}

std::string to_string(OperatorKind kind) {
  switch (kind) {
  case OperatorKind::Linear: return "linear";
  case OperatorKind::AffineSine: return "affine-sine";
  case OperatorKind::Square: return "square";
  case OperatorKind::Surrogate: return "surrogate";
  }
  return "unknown";
}

ForwardOperator ForwardOperator::linear(Mat matrix, Vec offset) {
  if (offset.size() != matrix.rows()) throw std::invalid_argument("linear: offset length != rows");
  ForwardOperator op;
  op.kind_ = OperatorKind::Linear;
  op.d_ = matrix.cols();
  op.n_ = matrix.rows();
  op.matrix_ = std::move(matrix);
  op.offset_ = std::move(offset);
  return op;
}

ForwardOperator ForwardOperator::linear(Mat matrix) {
  Vec zero = Vec::Zero(matrix.rows());
  return linear(std::move(matrix), std::move(zero));
}

ForwardOperator ForwardOperator::affine_sine(Mat matrix, Vec offset, Mat frequencies,
                                             double amplitude) {
  if (frequencies.rows() != matrix.rows() || frequencies.cols() != matrix.cols()) {
    throw std::invalid_argument("affine_sine: frequency matrix must match the linear part");
  }
  ForwardOperator op = linear(std::move(matrix), std::move(offset));
  op.kind_ = OperatorKind::AffineSine;
  op.freq_ = std::move(frequencies);
  op.amplitude_ = amplitude;
  return op;
}

ForwardOperator ForwardOperator::square(std::vector<bool> squared) {
  if (squared.empty()) throw std::invalid_argument("square: empty mask");
  ForwardOperator op;
  op.kind_ = OperatorKind::Square;
  op.d_ = static_cast<Index>(squared.size());
  op.n_ = op.d_;
  op.squared_ = std::move(squared);
  return op;
}

ForwardOperator ForwardOperator::surrogate(std::vector<Index> widths, Activation act,
                                           const std::vector<double>& weights, Vec out_scale,
                                           Vec out_shift) {
  ForwardOperator op;
  op.kind_ = OperatorKind::Surrogate;
  op.net_ = DenseNet(op.params_, "surrogate", std::move(widths), act);
  if (weights.size() != op.params_.size()) {
    throw std::invalid_argument("surrogate: got " + std::to_string(weights.size()) +
                                " weights, layout needs " + std::to_string(op.params_.size()));
  }
  std::copy(weights.begin(), weights.end(), op.params_.values().begin());
  op.d_ = op.net_.in_dim();
  op.n_ = op.net_.out_dim();
  if (out_scale.size() != op.n_ || out_shift.size() != op.n_) {
    throw std::invalid_argument("surrogate: output recalibration length != output width");
  }
  op.out_scale_ = std::move(out_scale);
  op.out_shift_ = std::move(out_shift);
  op.params_.require_finite("surrogate weights");
  // checksum over the canonical text of the weights
  op.checksum_ = hex64(fnv1a(dump_precise(op.to_json()["layers"], -1)));
  return op;
}

void ForwardOperator::check_input(Index rows) const {
  if (rows != d_) {
    throw std::invalid_argument("forward operator expects input dimension " + std::to_string(d_) +
                                ", got " + std::to_string(rows));
  }
}

Vec ForwardOperator::eval(const Vec& x) const {
  Mat out = eval_batch(Mat(x));
  return out.col(0);
}

Mat ForwardOperator::eval_batch(const Mat& xs) const {
  check_input(xs.rows());
  Mat out;
  switch (kind_) {
  case OperatorKind::Linear:
    out = matrix_ * xs;
    out.colwise() += offset_;
    break;
  case OperatorKind::AffineSine:
    out = matrix_ * xs;
    out.colwise() += offset_;
    out += amplitude_ * (freq_ * xs).array().sin().matrix();
    break;
  case OperatorKind::Square:
    out = xs;
    for (Index j = 0; j < d_; ++j) {
      if (squared_[static_cast<std::size_t>(j)]) out.row(j) = xs.row(j).array().square();
    }
    break;
  case OperatorKind::Surrogate:
    out = net_.forward(params_, xs);
    out = (out.array().colwise() * out_scale_.array()).matrix();
    out.colwise() += out_shift_;
    break;
  }
  if (!out.allFinite()) throw NumericalError("forward operator produced a non-finite value");
  return out;
}

Mat ForwardOperator::vjp(const Mat& xs, const Mat& grad_out) const {
  check_input(xs.rows());
  if (grad_out.rows() != n_ || grad_out.cols() != xs.cols()) {
    throw std::invalid_argument("vjp: cotangent shape mismatch");
  }
  switch (kind_) {
  case OperatorKind::Linear:
    return matrix_.transpose() * grad_out;
  case OperatorKind::AffineSine: {
    Mat g = (freq_ * xs).array().cos().matrix();
    g = (g.array() * grad_out.array()).matrix() * amplitude_;
    return matrix_.transpose() * grad_out + freq_.transpose() * g;
  }
  case OperatorKind::Square: {
    Mat g = grad_out;
    for (Index j = 0; j < d_; ++j) {
      if (squared_[static_cast<std::size_t>(j)]) g.row(j) = 2.0 * xs.row(j).cwiseProduct(grad_out.row(j));
    }
    return g;
  }
  case OperatorKind::Surrogate: {
    DenseNet::Tape tape;
    net_.forward(params_, xs, tape);
    Mat g = (grad_out.array().colwise() * out_scale_.array()).matrix();
    return net_.backward(params_, tape, g, nullptr);
  }
  }
  return {};
}

Json ForwardOperator::to_json() const {
  Json doc;
  doc["format"] = "mixem-forward-operator";
  doc["version"] = 1;
  doc["kind"] = to_string(kind_);
  doc["d"] = d_;
  doc["n"] = n_;
  switch (kind_) {
  case OperatorKind::Linear:
  case OperatorKind::AffineSine:
    doc["matrix"] = mixem::to_json(matrix_);
    doc["offset"] = mixem::to_json(offset_);
    if (kind_ == OperatorKind::AffineSine) {
      doc["frequencies"] = mixem::to_json(freq_);
      doc["amplitude"] = amplitude_;
    }
    break;
  case OperatorKind::Square:
    doc["squared"] = squared_;
    break;
  case OperatorKind::Surrogate: {
    doc["widths"] = net_.widths();
    doc["activation"] = to_string(net_.activation());
    Json layers = Json::array();
    for (std::size_t l = 0; l < net_.num_layers(); ++l) {
      layers.push_back({{"weight", mixem::to_json(Mat(params_.block(net_.weight_segment(l))))},
                        {"bias", mixem::to_json(Vec(params_.block(net_.bias_segment(l)).col(0)))}});
    }
    doc["layers"] = std::move(layers);
    doc["output_scale"] = mixem::to_json(out_scale_);
    doc["output_shift"] = mixem::to_json(out_shift_);
    if (!checksum_.empty()) doc["checksum"] = checksum_;
    break;
  }
  }
  return doc;
}

ForwardOperator ForwardOperator::from_json(const Json& doc) {
  const std::string kind = doc.at("kind").get<std::string>();
  if (kind == "linear") {
    return linear(mat_from_json(doc.at("matrix")), vec_from_json(doc.at("offset")));
  }
  if (kind == "affine-sine") {
    return affine_sine(mat_from_json(doc.at("matrix")), vec_from_json(doc.at("offset")),
                       mat_from_json(doc.at("frequencies")), doc.at("amplitude").get<double>());
  }
  if (kind == "square") return square(doc.at("squared").get<std::vector<bool>>());
  if (kind != "surrogate") throw std::invalid_argument("unknown operator kind '" + kind + "'");

  const auto widths = doc.at("widths").get<std::vector<Index>>();
  const auto& layers = doc.at("layers");
  if (layers.size() + 1 != widths.size()) {
    throw std::invalid_argument("surrogate: " + std::to_string(layers.size()) +
                                " layers do not match " + std::to_string(widths.size()) + " widths");
  }
  std::vector<double> weights;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Mat w = mat_from_json(layers[l].at("weight"));
    const Vec b = vec_from_json(layers[l].at("bias"));
    if (w.rows() != widths[l + 1] || w.cols() != widths[l] || b.size() != widths[l + 1]) {
      throw std::invalid_argument("surrogate: layer " + std::to_string(l) +
                                  " shape does not match the declared widths");
    }
    weights.insert(weights.end(), w.data(), w.data() + w.size());
    weights.insert(weights.end(), b.data(), b.data() + b.size());
  }
  ForwardOperator op =
      surrogate(widths, activation_from_string(doc.at("activation").get<std::string>()), weights,
                vec_from_json(doc.at("output_scale")), vec_from_json(doc.at("output_shift")));
  if (doc.contains("d") && doc.at("d").get<Index>() != op.d_) {
    throw std::invalid_argument("surrogate: declared d disagrees with the first width");
  }
  if (doc.contains("n") && doc.at("n").get<Index>() != op.n_) {
    throw std::invalid_argument("surrogate: declared n disagrees with the last width");
  }
  if (doc.contains("checksum") && doc.at("checksum").get<std::string>() != op.checksum_) {
    throw std::invalid_argument("surrogate: weight checksum mismatch");
  }
  return op;
}

void save_surrogate(const ForwardOperator& op, const std::filesystem::path& path) {
  write_text_file(path, dump_precise(op.to_json()));
}

ForwardOperator load_surrogate(const std::filesystem::path& path) {
  try {
    return ForwardOperator::from_json(read_json_file(path));
  } catch (const Json::exception& e) {
    throw std::runtime_error(path.string() + ": malformed operator file: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

ForwardOperator make_random_surrogate(Index d, Index n, const std::vector<Index>& hidden,
                                      std::uint64_t seed, const Box& box) {
  if (hidden.empty()) throw std::invalid_argument("make_random_surrogate: widths must be non-empty");
  box.validate();
  if (box.dim() != d) throw std::invalid_argument("make_random_surrogate: box dimension != d");
  std::vector<Index> widths{d};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(n);

  ParamVector params;
  DenseNet net(params, "surrogate", widths, Activation::Tanh);
  Rng rng(seed);
  net.init(params, rng, /*zero_last=*/false, /*gain=*/1.5);
  // spread the biases so the tanh units are not all centred on the box midpoint
  for (std::size_t l = 0; l + 1 < net.num_layers(); ++l) {
    auto b = params.block(net.bias_segment(l));
    std::uniform_real_distribution<double> dist(-0.5, 0.5);
    for (Index i = 0; i < b.rows(); ++i) b(i, 0) = dist(rng);
  }

  constexpr Index kProbes = 10000;
  Rng probe_rng(mix_seed(seed, 1));
  // inputs are mapped from the box to [-1, 1] by folding the affine map into
  // the first layer so that the network sees a centred input
  {
    auto w0 = params.block(net.weight_segment(0));
    auto b0 = params.block(net.bias_segment(0));
    const Vec half = 0.5 * (box.hi - box.lo);
    const Vec mid = 0.5 * (box.hi + box.lo);
    b0.col(0) -= w0 * mid.cwiseQuotient(half);
    w0 = w0 * half.cwiseInverse().asDiagonal();
  }
  const Mat probes = uniform_box(box.lo, box.hi, kProbes, probe_rng);
  const Mat out = net.forward(params, probes);
  Vec scale(n), shift(n);
  for (Index j = 0; j < n; ++j) {
    const double lo = out.row(j).minCoeff();
    const double hi = out.row(j).maxCoeff();
    const double span = hi - lo;
    scale(j) = span > 0.0 ? 1.0 / span : 1.0;
    shift(j) = -lo * scale(j);
  }
  std::vector<double> weights(params.values().begin(), params.values().end());
  return ForwardOperator::surrogate(widths, Activation::Tanh, weights, scale, shift);
}

void MeasurementSet::validate() const {
  if (ys.cols() < 1) throw std::invalid_argument("measurement set needs at least one observation");
  if (!ys.allFinite()) throw std::invalid_argument("measurement set contains non-finite values");
  prior_box.validate();
  if (prior_box.dim() != d) throw std::invalid_argument("prior box dimension != d");
  if (truth) {
    if (truth->xs.rows() != d || truth->xs.cols() != ys.cols()) {
      throw std::invalid_argument("ground truth shape does not match the observations");
    }
  }
}

Json to_json(const MeasurementSet& m) {
  Json doc;
  doc["format"] = "mixem-measurements";
  doc["version"] = 1;
  doc["d"] = m.d;
  doc["n"] = m.n();
  doc["count"] = m.count();
  doc["seed"] = m.seed;
  doc["prior_box"] = {{"lo", to_json(m.prior_box.lo)}, {"hi", to_json(m.prior_box.hi)}};
  doc["ys"] = columns_to_json(m.ys);
  if (m.truth) {
    doc["truth"] = {{"a", m.truth->theta.a},
                    {"b", m.truth->theta.b},
                    {"xs", columns_to_json(m.truth->xs)}};
  }
  return doc;
}

MeasurementSet measurements_from_json(const Json& doc) {
  MeasurementSet m;
  m.d = doc.at("d").get<Index>();
  const auto n = doc.at("n").get<Index>();
  m.seed = doc.value("seed", std::uint64_t{0});
  m.prior_box = {vec_from_json(doc.at("prior_box").at("lo")),
                 vec_from_json(doc.at("prior_box").at("hi"))};
  m.ys = columns_from_json(doc.at("ys"), n);
  if (doc.contains("truth")) {
    const auto& t = doc.at("truth");
    m.truth = MeasurementTruth{columns_from_json(t.at("xs"), m.d),
                               {t.at("a").get<double>(), t.at("b").get<double>()}};
  }
  m.validate();
  return m;
}

void save_measurements(const MeasurementSet& m, const std::filesystem::path& path) {
  write_text_file(path, dump_precise(to_json(m)));
}

MeasurementSet load_measurements(const std::filesystem::path& path) {
  try {
    return measurements_from_json(read_json_file(path));
  } catch (const Json::exception& e) {
    throw std::runtime_error(path.string() + ": malformed measurement file: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

MeasurementSet simulate_measurements(const ForwardOperator& op, const NoiseParams& theta,
                                     const Box& box, Index count, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("simulate_measurements: need N >= 1");
  theta.validate();
  box.validate();
  if (box.dim() != op.input_dim()) throw std::invalid_argument("prior box dimension != d");
  Rng rng(seed);
  MeasurementSet m;
  m.d = op.input_dim();
  m.prior_box = box;
  m.seed = seed;
  Mat xs = uniform_box(box.lo, box.hi, count, rng);
  const Mat fx = op.eval_batch(xs);
  m.ys.resize(op.output_dim(), count);
  for (Index i = 0; i < count; ++i) m.ys.col(i) = sample_noisy(fx.col(i), theta, rng);
  m.truth = MeasurementTruth{std::move(xs), theta};
  return m;
}

} // namespace mixem
