#include "kk/montecarlo.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <ostream>
#include <tuple>

#include "kk/flow.hpp"
#include "kk/frozen.hpp"
#include "kk/parallel.hpp"

namespace kk {

// ---------------------------------------------------------------- generator

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

CounterRng::CounterRng(std::uint64_t seed, std::uint64_t path, std::uint64_t step)
    : key_(mix64(mix64(mix64(seed) ^ path) ^ step)) {}

CounterRng::result_type CounterRng::operator()() {
  return mix64(key_ ^ mix64(counter_++));
}

double CounterRng::uniform() {
  // 53 random bits, shifted off zero.
  return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
}

double CounterRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double r = std::sqrt(-2.0 * std::log(uniform()));
  const double a = 2.0 * std::numbers::pi * uniform();
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

// ---------------------------------------------------------------- simulation

SimScheme parse_scheme(const std::string& name) {
  if (name == "euler") return SimScheme::Euler;
  if (name == "exact-linear-substep") return SimScheme::ExactLinearSubstep;
  throw DomainError("scheme: unknown scheme '" + name + "'");
}

std::string scheme_name(SimScheme s) {
  return s == SimScheme::Euler ? "euler" : "exact-linear-substep";
}

void SimConfig::validate() const {
  if (nsteps < 1) throw DomainError("nsteps: must be at least 1");
  if (npaths < 1) throw DomainError("npaths: must be at least 1");
  if (workers < 0) throw DomainError("workers: must be non-negative");
}

namespace {

// One path; false when the state left the finite range.
bool run_path(const ModelSpec& model, double s, double h, int nsteps, SimScheme scheme,
              std::uint64_t seed, std::uint64_t path, PhasePoint& X) {
  const int d = model.d;
  const double sh = std::sqrt(h);
  Vec z1(d), z2(d);
  for (int k = 0; k < nsteps; ++k) {
    const double r = s + k * h;
    CounterRng rng(seed, path, static_cast<std::uint64_t>(k));
    for (int i = 0; i < d; ++i) z1(i) = rng.normal();
    const Vec f1 = model.F1(r, X);
    const Vec f2 = model.F2(r, X);
    const Mat sig = model.sigma(r, X);
    if (scheme == SimScheme::Euler) {
      X.head(d) += f1 * h + sig * (sh * z1);
      X.tail(d) += f2 * h;
    } else {
      for (int i = 0; i < d; ++i) z2(i) = rng.normal();
      const Mat G = grad_x1_F2(model, r, X);
      // W_h = sqrt(h) z1 and int_0^h (h - u) dW_u = h^{3/2} (z1 / 2 + z2 / (2 sqrt 3)).
      const Vec w = sig * (sh * z1);
      const Vec iw = sig * (h * sh * (0.5 * z1 + z2 / (2.0 * std::sqrt(3.0))));
      X.tail(d) += f2 * h + G * (f1 * (0.5 * h * h) + iw);
      X.head(d) += f1 * h + w;
    }
    if (!X.allFinite()) return false;
  }
  return true;
}

}  // namespace

SampleBatch simulate(const ModelSpec& model, double s, const PhasePoint& x, double t,
                     const SimConfig& cfg) {
  cfg.validate();
  validate_model(model);
  require_phase_point(x, "simulate: x");
  if (phase_dim(x) != model.d) throw DomainError("simulate: x has the wrong dimension");
  if (!(t > s)) throw DomainError("simulate requires t > s");
  const int d = model.d;
  const double h = (t - s) / cfg.nsteps;
  Mat all(2 * d, cfg.npaths);
  std::vector<char> ok(static_cast<size_t>(cfg.npaths), 0);
  parallel_for(
      static_cast<size_t>(cfg.npaths),
      [&](size_t p) {
        PhasePoint X = x;
        ok[p] = run_path(model, s, h, cfg.nsteps, cfg.scheme, cfg.seed, p, X);
        all.col(static_cast<Eigen::Index>(p)) = X;
      },
      cfg.workers);

  SampleBatch b;
  b.d = d;
  b.seed = cfg.seed;
  b.nsteps = cfg.nsteps;
  b.span = t - s;
  const long kept = std::count(ok.begin(), ok.end(), 1);
  b.points.resize(2 * d, kept);
  long j = 0;
  for (long p = 0; p < cfg.npaths; ++p) {
    if (ok[p]) {
      b.points.col(j++) = all.col(p);
    } else {
      b.excluded_paths.push_back(p);
    }
  }
  b.excluded = cfg.npaths - kept;
  return b;
}

// ---------------------------------------------------------------- binary format

namespace {

constexpr char kMagic[5] = {'K', 'K', 'M', 'C', '1'};

template <class U>
void put_le(std::ostream& out, U v) {
  unsigned char buf[sizeof(U)];
  for (size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U get_le(std::istream& in) {
  unsigned char buf[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(U))) throw DomainError("sample file truncated");
  U v = 0;
  for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_batch(std::ostream& out, const SampleBatch& batch) {
  out.write(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(batch.d));
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(batch.size()));
  put_le<std::uint64_t>(out, batch.seed);
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(batch.nsteps));
  const double* p = batch.points.data();
  for (Eigen::Index i = 0; i < batch.points.size(); ++i) put_le(out, std::bit_cast<std::uint64_t>(p[i]));
}

SampleBatch read_batch(std::istream& in) {
  char magic[5];
  if (!in.read(magic, 5) || std::memcmp(magic, kMagic, 5) != 0)
    throw DomainError("sample file: bad magic");
  SampleBatch b;
  b.d = static_cast<int>(get_le<std::uint32_t>(in));
  const auto n = get_le<std::uint64_t>(in);
  b.seed = get_le<std::uint64_t>(in);
  b.nsteps = static_cast<int>(get_le<std::uint64_t>(in));
  if (b.d < 1) throw DomainError("sample file: bad dimension");
  b.points.resize(2 * b.d, static_cast<Eigen::Index>(n));
  double* p = b.points.data();
  for (Eigen::Index i = 0; i < b.points.size(); ++i) p[i] = std::bit_cast<double>(get_le<std::uint64_t>(in));
  return b;
}

// ---------------------------------------------------------------- KDE

std::string provenance_name(Provenance p) {
  switch (p) {
    case Provenance::Kde: return "kde";
    case Provenance::Parametrix: return "parametrix";
    case Provenance::ClosedForm: return "closed-form";
  }
  return "kde";
}

double default_bandwidth(long npaths) {
  return 0.3 * std::pow(static_cast<double>(std::max(1L, npaths)), -1.0 / 6.0);
}

std::vector<DensityEstimate> kde(const Mat& samples, double span,
                                 const std::vector<PhasePoint>& queries, const KdeOptions& opts) {
  const long n = samples.cols();
  if (n == 0) throw DomainError("kde: empty sample");
  if (samples.rows() % 2 != 0) throw DomainError("kde: samples must have even row count");
  if (!(span > 0.0)) throw DomainError("kde: span must be positive");
  if (opts.h < 0.0 || !std::isfinite(opts.h)) throw DomainError("kde: bandwidth factor must be positive");
  const double h = opts.h > 0.0 ? opts.h : default_bandwidth(n);
  const int d = static_cast<int>(samples.rows() / 2);
  const double b1 = h * std::sqrt(span), b2 = h * span * std::sqrt(span);
  Vec inv(2 * d);
  inv.head(d).setConstant(1.0 / b1);
  inv.tail(d).setConstant(1.0 / b2);
  const double norm =
      std::pow(2.0 * std::numbers::pi, -d) * std::pow(b1, -d) * std::pow(b2, -d);

  std::vector<DensityEstimate> out(queries.size());
  std::vector<double> k(static_cast<size_t>(n));
  for (size_t q = 0; q < queries.size(); ++q) {
    const PhasePoint& y = queries[q];
    if (y.size() != samples.rows()) throw DomainError("kde: query has the wrong dimension");
    double sum = 0.0, sum2 = 0.0;
    for (long i = 0; i < n; ++i) {
      const double e = ((samples.col(i) - y).cwiseProduct(inv)).squaredNorm();
      k[i] = norm * std::exp(-0.5 * e);
      sum += k[i];
      sum2 += k[i] * k[i];
    }
    DensityEstimate& est = out[q];
    est.value = sum / n;
    est.h1 = b1;
    est.h2 = b2;
    est.ess = sum2 > 0.0 ? sum * sum / sum2 : 0.0;
    if (opts.bootstrap > 0) {
      double m = 0.0, m2 = 0.0;
      for (int b = 0; b < opts.bootstrap; ++b) {
        CounterRng rng(opts.seed, q, static_cast<std::uint64_t>(b));
        double acc = 0.0;
        for (long i = 0; i < n; ++i) {
          const auto idx = static_cast<long>(
              (static_cast<unsigned __int128>(rng()) * static_cast<std::uint64_t>(n)) >> 64);
          acc += k[idx];
        }
        const double v = acc / n;
        m += v;
        m2 += v * v;
      }
      m /= opts.bootstrap;
      const double var = m2 / opts.bootstrap - m * m;
      est.std_error = std::sqrt(std::max(0.0, var * opts.bootstrap / std::max(1, opts.bootstrap - 1)));
    }
  }
  return out;
}

Vec mc_grad_density(const ModelSpec& model, double s, const PhasePoint& x, double t,
                    const PhasePoint& y, bool x1_block, const SimConfig& cfg,
                    const KdeOptions& kopts, double fd_factor) {
  if (!(fd_factor > 0.0)) throw DomainError("mc_grad_density: fd_factor must be positive");
  const int d = model.d;
  const double span = t - s;
  const double step = fd_factor * (x1_block ? std::sqrt(span) : span * std::sqrt(span));
  KdeOptions k = kopts;
  k.bootstrap = 0;
  // The bandwidth follows the unperturbed batch size so both sides share it.
  if (k.h <= 0.0) k.h = default_bandwidth(cfg.npaths);
  Vec g(d);
  for (int i = 0; i < d; ++i) {
    PhasePoint xp = x, xm = x;
    const int idx = x1_block ? i : d + i;
    xp(idx) += step;
    xm(idx) -= step;
    const double vp = kde(simulate(model, s, xp, t, cfg).points, span, {y}, k)[0].value;
    const double vm = kde(simulate(model, s, xm, t, cfg).points, span, {y}, k)[0].value;
    g(i) = (vp - vm) / (2.0 * step);
  }
  return g;
}

// ---------------------------------------------------------------- bound audit

FlowChoice parse_flow_choice(const std::string& name) {
  if (name == "tilde") return FlowChoice::Tilde;
  if (name == "mollified-eps") return FlowChoice::Mollified;
  if (name == "raw") return FlowChoice::Raw;
  throw DomainError("flow: unknown flow choice '" + name + "'");
}

std::string flow_choice_name(FlowChoice c) {
  switch (c) {
    case FlowChoice::Tilde: return "tilde";
    case FlowChoice::Mollified: return "mollified-eps";
    case FlowChoice::Raw: return "raw";
  }
  return "tilde";
}

PhasePoint audit_center(const ModelSpec& model, double s, const PhasePoint& x, double t,
                        FlowChoice choice) {
  switch (choice) {
    case FlowChoice::Tilde:
      return tilde_flow(model, s, t, x).end();
    case FlowChoice::Mollified: {
      // The mollifier radius must stay below one.
      const double eps = std::min(std::pow(t - s, 1.5), 0.5);
      return flow_point(mollify_drift(model, eps), s, t, x);
    }
    case FlowChoice::Raw:
      return x;
  }
  return x;
}

std::vector<PhasePoint> default_audit_offsets(int d) {
  const double offs[5][2] = {{0, 0}, {1.5, 0.75}, {-1.5, -0.75}, {0.8, 0}, {0, -0.4}};
  std::vector<PhasePoint> out;
  for (const auto& o : offs)
    out.push_back(make_point(Vec::Constant(d, o[0] / std::sqrt(d)), Vec::Constant(d, o[1] / std::sqrt(d))));
  return out;
}

std::vector<AuditQuery> audit_grid(const ModelSpec& model, double s,
                                   const std::vector<PhasePoint>& xs,
                                   const std::vector<double>& spans,
                                   const std::vector<PhasePoint>& offsets, double max_offset) {
  for (const PhasePoint& v : offsets) {
    if (v.size() != 2 * model.d) throw DomainError("grid.offsets: wrong dimension");
    if (v.norm() > max_offset) throw DomainError("grid.offsets: scaled offset above the bound");
  }
  std::vector<AuditQuery> g;
  for (const PhasePoint& x : xs) {
    require_phase_point(x, "grid.xs");
    if (x.size() != 2 * model.d) throw DomainError("grid.xs: wrong dimension");
    for (double tau : spans) {
      if (!(tau > 0.0)) throw DomainError("grid.spans: must be positive");
      const PhasePoint c = audit_center(model, s, x, s + tau, FlowChoice::Tilde);
      for (const PhasePoint& v : offsets)
        g.push_back({s, s + tau, x, c + scale_map(tau, v, ScaleDirection::Forward)});
    }
  }
  return g;
}

BoundReport fit_bounds(std::vector<AuditPoint> points, const AuditOptions& opts) {
  if (opts.lambdas.empty()) throw DomainError("audit: empty lambda ladder");
  if (!(opts.c_max >= 1.0)) throw DomainError("audit: c_max must be at least 1");
  BoundReport rep;
  auto g = [](double lam, const AuditPoint& p) {
    return gauss_g(lam, p.query.t - p.query.s, p.center - p.query.y);
  };
  const double inf = std::numeric_limits<double>::infinity();
  double bestC = inf, bestL = opts.lambdas.front();
  for (double lam : opts.lambdas) {
    if (!(lam > 0.0)) throw DomainError("audit: lambdas must be positive");
    double C = 1.0;
    for (const AuditPoint& p : points) {
      if (p.flagged) continue;
      const double hi = p.density - opts.z * p.std_error;
      const double lo = p.density + opts.z * p.std_error;
      if (hi > 0.0) C = std::max(C, hi / g(lam, p));
      C = std::max(C, lo > 0.0 ? g(1.0 / lam, p) / lo : inf);
    }
    if (C < bestC) {
      bestC = C;
      bestL = lam;
    }
  }
  rep.capped = !(bestC <= opts.c_max);
  rep.C0 = rep.capped ? opts.c_max : bestC;
  rep.lambda0 = bestL;
  for (AuditPoint& p : points) {
    if (p.flagged) {
      ++rep.flagged;
      continue;
    }
    const double up = g(rep.lambda0, p), low = g(1.0 / rep.lambda0, p);
    p.upper_ratio = p.density / up;
    p.lower_ratio = p.density > 0.0 ? low / p.density : inf;
    p.violation = p.density - opts.z * p.std_error > rep.C0 * up * (1.0 + 1e-12) ||
                  (p.density + opts.z * p.std_error) * rep.C0 * (1.0 + 1e-12) < low;
    rep.violations += p.violation;
  }
  rep.points = std::move(points);
  return rep;
}

namespace {

std::uint64_t hash_doubles(std::uint64_t h, const double* v, size_t n) {
  for (size_t i = 0; i < n; ++i) h = mix64(h ^ std::bit_cast<std::uint64_t>(v[i]));
  return h;
}

}  // namespace

BoundReport bound_audit(const ModelSpec& model, const std::vector<AuditQuery>& grid,
                        const SimConfig& sim, const AuditOptions& opts) {
  sim.validate();
  using Key = std::tuple<double, double, std::vector<double>>;
  std::map<Key, std::vector<size_t>> groups;
  for (size_t i = 0; i < grid.size(); ++i) {
    const AuditQuery& q = grid[i];
    require_phase_point(q.x, "audit: x");
    require_phase_point(q.y, "audit: y");
    if (!(q.t > q.s)) throw DomainError("audit: each query needs t > s");
    groups[Key{q.s, q.t, std::vector<double>(q.x.data(), q.x.data() + q.x.size())}].push_back(i);
  }
  std::vector<AuditPoint> pts(grid.size());
  for (const auto& [key, idx] : groups) {
    const AuditQuery& q0 = grid[idx.front()];
    std::uint64_t h = mix64(sim.seed);
    const double st[2] = {q0.s, q0.t};
    h = hash_doubles(h, st, 2);
    h = hash_doubles(h, q0.x.data(), static_cast<size_t>(q0.x.size()));
    SimConfig cfg = sim;
    cfg.seed = h;
    const SampleBatch batch = simulate(model, q0.s, q0.x, q0.t, cfg);
    const PhasePoint center = audit_center(model, q0.s, q0.x, q0.t, opts.flow);
    std::vector<PhasePoint> ys;
    for (size_t i : idx) ys.push_back(grid[i].y);
    KdeOptions k = opts.kde;
    k.seed = mix64(h ^ opts.kde.seed);
    const double span = q0.t - q0.s;
    std::vector<DensityEstimate> est;
    if (batch.size() > 0) est = kde(batch.points, span, ys, k);
    for (size_t j = 0; j < idx.size(); ++j) {
      AuditPoint& p = pts[idx[j]];
      p.query = grid[idx[j]];
      p.center = center;
      if (!est.empty()) {
        p.density = est[j].value;
        p.std_error = est[j].std_error;
        p.ess = est[j].ess;
      }
      p.flagged = p.ess < opts.min_ess;
    }
  }
  return fit_bounds(std::move(pts), opts);
}

// ---------------------------------------------------------------- rates

RateFit rate_fit(const std::vector<std::pair<double, double>>& pairs) {
  if (pairs.size() < 4) throw DomainError("rate_fit: needs at least 4 pairs");
  std::vector<long> levels;
  for (const auto& [span, v] : pairs) {
    if (!(span > 0.0) || !(v > 0.0) || !std::isfinite(span) || !std::isfinite(v))
      throw DomainError("rate_fit: spans and values must be positive and finite");
    levels.push_back(std::lround(std::log2(span)));
  }
  std::sort(levels.begin(), levels.end());
  if (std::unique(levels.begin(), levels.end()) - levels.begin() < 3)
    throw DomainError("rate_fit: spans must cover at least 3 dyadic levels");
  const double n = static_cast<double>(pairs.size());
  double mx = 0, my = 0;
  for (const auto& [a, b] : pairs) {
    mx += std::log(a);
    my += std::log(b);
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (const auto& [a, b] : pairs) {
    const double dx = std::log(a) - mx, dy = std::log(b) - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (!(sxx > 0.0)) throw NumericError("rate_fit: degenerate spread of spans");
  RateFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  const double res = syy - f.slope * sxy;
  f.r2 = syy > 0.0 ? 1.0 - std::max(0.0, res) / syy : 1.0;
  return f;
}

std::vector<std::pair<double, double>> sup_gradient_series(const ModelSpec& model, double s,
                                                           const PhasePoint& x,
                                                           const std::vector<double>& spans,
                                                           int j1, int j2) {
  std::vector<std::pair<double, double>> out;
  for (double span : spans) {
    if (!(span > 0.0)) throw DomainError("sup_gradient_series: spans must be positive");
    const FrozenFlow flow(model, s, x, s, s + span);
    out.emplace_back(span, flow.gaussian(s, s + span).sup_derivative(j1, j2));
  }
  return out;
}

}  // namespace kk
