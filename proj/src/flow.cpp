#include "mixem/flow.hpp"

#include <cmath>
#include <numbers>

namespace mixem {

void FlowArchitecture::validate() const {
  if (blocks < 1) throw std::invalid_argument("flow needs at least one coupling block");
  for (Index h : hidden) {
    if (h < 1) throw std::invalid_argument("flow hidden widths must be positive");
  }
  if (!(scale_clamp > 0.0)) throw std::invalid_argument("flow scale clamp must be positive");
  if (!(init_noise >= 0.0)) throw std::invalid_argument("flow init noise must be non-negative");
}

CouplingBlock::CouplingBlock(ParamVector& params, int index, std::vector<Index> active,
                             std::vector<Index> passive, Index cond_dim,
                             const FlowArchitecture& arch)
    : active_(std::move(active)), passive_(std::move(passive)), cond_dim_(cond_dim),
      clamp_(arch.scale_clamp) {
  std::vector<Index> widths{static_cast<Index>(passive_.size()) + cond_dim_};
  widths.insert(widths.end(), arch.hidden.begin(), arch.hidden.end());
  widths.push_back(static_cast<Index>(active_.size()));
  const std::string tag = "block" + std::to_string(index);
  scale_net_ = DenseNet(params, tag + ".scale", widths, arch.activation);
  shift_net_ = DenseNet(params, tag + ".shift", widths, arch.activation);
}

Mat CouplingBlock::conditioner_input(const Mat& u, const Mat& y) const {
  const auto np = static_cast<Index>(passive_.size());
  Mat cin(np + cond_dim_, u.cols());
  for (Index k = 0; k < np; ++k) cin.row(k) = u.row(passive_[static_cast<std::size_t>(k)]);
  cin.bottomRows(cond_dim_) = y;
  return cin;
}

void CouplingBlock::scales(const ParamVector& params, const Mat& cin, Mat& s, Mat& t,
                           Tape* tape) const {
  if (tape != nullptr) {
    s = scale_net_.forward(params, cin, tape->scale);
    t = shift_net_.forward(params, cin, tape->shift);
  } else {
    s = scale_net_.forward(params, cin);
    t = shift_net_.forward(params, cin);
  }
  s = (clamp_ * (s.array() / clamp_).tanh()).matrix();
}

void CouplingBlock::push(const ParamVector& params, Mat& u, const Mat& y, Vec& logdet,
                         Tape* tape) const {
  Mat s, t;
  scales(params, conditioner_input(u, y), s, t, tape);
  const auto na = static_cast<Index>(active_.size());
  Mat z_side(na, u.cols());
  for (Index k = 0; k < na; ++k) {
    const Index row = active_[static_cast<std::size_t>(k)];
    z_side.row(k) = u.row(row);
    u.row(row) = (u.row(row).array() * s.row(k).array().exp() + t.row(k).array()).matrix();
  }
  logdet += s.colwise().sum().transpose();
  if (tape != nullptr) {
    tape->s = std::move(s);
    tape->z_side = std::move(z_side);
  }
}

void CouplingBlock::pull(const ParamVector& params, Mat& u, const Mat& y, Vec& logdet,
                         Tape* tape) const {
  Mat s, t;
  scales(params, conditioner_input(u, y), s, t, tape);
  const auto na = static_cast<Index>(active_.size());
  Mat z_side(na, u.cols());
  for (Index k = 0; k < na; ++k) {
    const Index row = active_[static_cast<std::size_t>(k)];
    u.row(row) = ((u.row(row) - t.row(k)).array() * (-s.row(k).array()).exp()).matrix();
    z_side.row(k) = u.row(row);
  }
  logdet -= s.colwise().sum().transpose();
  if (tape != nullptr) {
    tape->s = std::move(s);
    tape->z_side = std::move(z_side);
  }
}

void CouplingBlock::backprop_conditioner(const ParamVector& params, const Tape& tape,
                                         const Mat& g_s, const Mat& g_t, Mat& g,
                                         ParamVector& grad) const {
  // s = c * tanh(raw / c)  =>  ds/draw = 1 - (s / c)^2
  const Mat g_raw = (g_s.array() * (1.0 - (tape.s.array() / clamp_).square())).matrix();
  Mat g_cin = scale_net_.backward(params, tape.scale, g_raw, &grad);
  g_cin += shift_net_.backward(params, tape.shift, g_t, &grad);
  for (std::size_t k = 0; k < passive_.size(); ++k) {
    g.row(passive_[k]) += g_cin.row(static_cast<Index>(k));
  }
}

void CouplingBlock::push_backward(const ParamVector& params, const Tape& tape, Mat& g,
                                  const Vec& g_logdet, ParamVector& grad) const {
  const auto na = static_cast<Index>(active_.size());
  Mat g_out(na, g.cols());
  for (Index k = 0; k < na; ++k) g_out.row(k) = g.row(active_[static_cast<std::size_t>(k)]);
  const Mat e_s = tape.s.array().exp().matrix();
  Mat g_s = (g_out.array() * tape.z_side.array() * e_s.array()).matrix();
  g_s.rowwise() += g_logdet.transpose();
  for (Index k = 0; k < na; ++k) {
    g.row(active_[static_cast<std::size_t>(k)]) = g_out.row(k).cwiseProduct(e_s.row(k));
  }
  backprop_conditioner(params, tape, g_s, g_out, g, grad);
}

void CouplingBlock::pull_backward(const ParamVector& params, const Tape& tape, Mat& g,
                                  const Vec& g_logdet, ParamVector& grad) const {
  const auto na = static_cast<Index>(active_.size());
  Mat g_z(na, g.cols());
  for (Index k = 0; k < na; ++k) g_z.row(k) = g.row(active_[static_cast<std::size_t>(k)]);
  const Mat g_x = (g_z.array() * (-tape.s.array()).exp()).matrix();
  Mat g_s = -(g_z.array() * tape.z_side.array()).matrix();
  g_s.rowwise() -= g_logdet.transpose();
  for (Index k = 0; k < na; ++k) g.row(active_[static_cast<std::size_t>(k)]) = g_x.row(k);
  backprop_conditioner(params, tape, g_s, -g_x, g, grad);
}

ConditionalFlow::ConditionalFlow(Index dim, Index cond_dim, FlowArchitecture arch,
                                 std::uint64_t seed)
    : dim_(dim), cond_dim_(cond_dim), arch_(std::move(arch)) {
  if (dim_ < 1 || cond_dim_ < 1) {
    throw std::invalid_argument("flow needs positive sample and condition dimensions");
  }
  arch_.validate();
  // fixed halves A = [0, ceil(d/2)), B = rest; blocks alternate which half moves
  const Index h = (dim_ + 1) / 2;
  std::vector<Index> first, second;
  for (Index i = 0; i < dim_; ++i) (i < h ? first : second).push_back(i);
  for (int k = 0; k < arch_.blocks; ++k) {
    if (dim_ == 1) {
      blocks_.emplace_back(params_, k, first, std::vector<Index>{}, cond_dim_, arch_);
    } else if (k % 2 == 0) {
      blocks_.emplace_back(params_, k, first, second, cond_dim_, arch_);
    } else {
      blocks_.emplace_back(params_, k, second, first, cond_dim_, arch_);
    }
  }
  Rng rng(seed);
  for (const auto& b : blocks_) {
    b.scale_net().init(params_, rng, /*zero_last=*/true);
    b.shift_net().init(params_, rng, /*zero_last=*/true);
  }
  if (arch_.init_noise > 0.0) {
    std::normal_distribution<double> nd(0.0, arch_.init_noise);
    for (const auto& b : blocks_) {
      for (const DenseNet* net : {&b.scale_net(), &b.shift_net()}) {
        auto w = params_.block(net->weight_segment(net->num_layers() - 1));
        for (Index i = 0; i < w.size(); ++i) w.data()[i] = nd(rng);
      }
    }
  }
}

void ConditionalFlow::set_params(const ParamVector& p) {
  if (!p.same_layout(params_)) throw std::invalid_argument("set_params: layout mismatch");
  params_ = p;
}

void ConditionalFlow::check_shapes(const Mat& u, const Mat& y) const {
  if (u.rows() != dim_) {
    throw std::invalid_argument("flow expects samples of dimension " + std::to_string(dim_) +
                                ", got " + std::to_string(u.rows()));
  }
  if (y.rows() != cond_dim_) {
    throw std::invalid_argument("flow expects conditions of dimension " +
                                std::to_string(cond_dim_) + ", got " + std::to_string(y.rows()));
  }
  if (u.cols() != y.cols()) throw std::invalid_argument("flow: sample and condition batch sizes differ");
}

ConditionalFlow::Output ConditionalFlow::push(const Mat& z, const Mat& y, Tape* tape) const {
  check_shapes(z, y);
  Output out{z, Vec::Zero(z.cols())};
  if (tape != nullptr) tape->blocks.resize(blocks_.size());
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    blocks_[k].push(params_, out.values, y, out.logdet, tape ? &tape->blocks[k] : nullptr);
  }
  if (!out.values.allFinite() || !out.logdet.allFinite()) {
    throw NumericalError("flow push produced a non-finite value");
  }
  return out;
}

ConditionalFlow::Output ConditionalFlow::pull(const Mat& x, const Mat& y, Tape* tape) const {
  check_shapes(x, y);
  Output out{x, Vec::Zero(x.cols())};
  if (tape != nullptr) tape->blocks.resize(blocks_.size());
  for (std::size_t k = blocks_.size(); k-- > 0;) {
    blocks_[k].pull(params_, out.values, y, out.logdet, tape ? &tape->blocks[k] : nullptr);
  }
  if (!out.values.allFinite() || !out.logdet.allFinite()) {
    throw NumericalError("flow pull produced a non-finite value");
  }
  return out;
}

void ConditionalFlow::push_backward(const Tape& tape, const Mat& g_x, const Vec& g_logdet,
                                    ParamVector& grad) const {
  Mat g = g_x;
  for (std::size_t k = blocks_.size(); k-- > 0;) {
    blocks_[k].push_backward(params_, tape.blocks[k], g, g_logdet, grad);
  }
}

void ConditionalFlow::pull_backward(const Tape& tape, const Mat& g_z, const Vec& g_logdet,
                                    ParamVector& grad) const {
  Mat g = g_z;
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    blocks_[k].pull_backward(params_, tape.blocks[k], g, g_logdet, grad);
  }
}

Vec standard_normal_logpdf(const Mat& z) {
  const double c = 0.5 * static_cast<double>(z.rows()) * std::log(2.0 * std::numbers::pi);
  return (-0.5 * z.colwise().squaredNorm().array() - c).matrix().transpose();
}

Vec ConditionalFlow::log_density(const Mat& x, const Mat& y) const {
  const Output z = pull(x, y);
  return standard_normal_logpdf(z.values) + z.logdet;
}

Mat ConditionalFlow::sample(const Vec& y, Index m, Rng& rng) const {
  if (m < 1) throw std::invalid_argument("sample: need m >= 1");
  const Mat z = standard_normal(dim_, m, rng);
  return push(z, repeat_column(y, m)).values;
}

Json ConditionalFlow::to_json() const {
  Json doc;
  doc["format"] = "mixem-flow";
  doc["version"] = 1;
  doc["d"] = dim_;
  doc["cond_dim"] = cond_dim_;
  doc["blocks"] = arch_.blocks;
  doc["hidden"] = arch_.hidden;
  doc["scale_clamp"] = arch_.scale_clamp;
  doc["activation"] = to_string(arch_.activation);
  doc["init_noise"] = arch_.init_noise;
  doc["params"] = std::vector<double>(params_.values().begin(), params_.values().end());
  return doc;
}

ConditionalFlow ConditionalFlow::from_json(const Json& doc) {
  FlowArchitecture arch;
  arch.blocks = doc.at("blocks").get<int>();
  arch.hidden = doc.at("hidden").get<std::vector<Index>>();
  arch.scale_clamp = doc.at("scale_clamp").get<double>();
  arch.activation = activation_from_string(doc.at("activation").get<std::string>());
  arch.init_noise = doc.value("init_noise", 0.0);
  ConditionalFlow flow(doc.at("d").get<Index>(), doc.at("cond_dim").get<Index>(), arch, 0);
  const auto values = doc.at("params").get<std::vector<double>>();
  if (values.size() != flow.params_.size()) {
    throw std::invalid_argument("flow checkpoint holds " + std::to_string(values.size()) +
                                " parameters, architecture needs " +
                                std::to_string(flow.params_.size()));
  }
  std::copy(values.begin(), values.end(), flow.params_.values().begin());
  flow.params_.require_finite("flow checkpoint");
  return flow;
}

std::pair<Vec, double> push(const ConditionalFlow& flow, const Vec& y, const Vec& z) {
  const auto out = flow.push(Mat(z), Mat(y));
  return {out.values.col(0), out.logdet(0)};
}

std::pair<Vec, double> pull(const ConditionalFlow& flow, const Vec& y, const Vec& x) {
  const auto out = flow.pull(Mat(x), Mat(y));
  return {out.values.col(0), out.logdet(0)};
}

double log_density(const ConditionalFlow& flow, const Vec& y, const Vec& x) {
  return flow.log_density(Mat(x), Mat(y))(0);
}

Mat sample_posterior(const ConditionalFlow& flow, const Vec& y, Index m, Rng& rng) {
  return flow.sample(y, m, rng);
}

void save_flow(const ConditionalFlow& flow, const std::filesystem::path& path) {
  write_text_file(path, dump_precise(flow.to_json()));
}

ConditionalFlow load_flow(const std::filesystem::path& path) {
  try {
    return ConditionalFlow::from_json(read_json_file(path));
  } catch (const Json::exception& e) {
    throw std::runtime_error(path.string() + ": malformed flow checkpoint: " + e.what());
  }
}

Mat repeat_column(const Vec& y, Index count) { return y.replicate(1, count); }

} // namespace mixem
