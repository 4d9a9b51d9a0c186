#include "amortda/dynamics.hpp"

#include <cmath>
#include <complex>
#include <cstring>

namespace amortda {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

void SystemSpec::validate() const {
  if (dt <= 0.0) throw Error("SystemSpec: dt must be positive");
  if (steps_per_observation < 1) throw Error("SystemSpec: steps_per_observation must be >= 1");
  switch (kind) {
    case SystemKind::L96:
      if (dimension < 4) throw Error("SystemSpec: L96 needs D >= 4 for the j-2..j+1 stencil");
      break;
    case SystemKind::VL20:
      if (dimension % 2 != 0) throw Error("SystemSpec: VL20 state is (X_1..X_J, theta_1..theta_J)");
      if (dimension / 2 < 4) throw Error("SystemSpec: VL20 needs J >= 4");
      break;
    case SystemKind::KS:
      if (dimension < 8 || (dimension & (dimension - 1)) != 0)
        throw Error("SystemSpec: KS grid size must be a power of two");
      if (ks_domain <= 0.0) throw Error("SystemSpec: KS domain length must be positive");
      break;
  }
}

SystemSpec SystemSpec::l96(int d, double f) {
  SystemSpec s;
  s.kind = SystemKind::L96;
  s.dimension = d;
  s.forcing = f;
  s.dt = 0.05;
  s.steps_per_observation = 2;
  s.validate();
  return s;
}

SystemSpec SystemSpec::vl20(int j) {
  SystemSpec s;
  s.kind = SystemKind::VL20;
  s.dimension = 2 * j;
  s.forcing = 10.0;
  s.vl20_g = 10.0;
  s.vl20_alpha = 1.0;
  s.vl20_gamma = 1.0;
  s.dt = 0.05;
  s.steps_per_observation = 2;
  s.validate();
  return s;
}

SystemSpec SystemSpec::ks(int n) {
  SystemSpec s;
  s.kind = SystemKind::KS;
  s.dimension = n;
  s.dt = 0.5;
  s.steps_per_observation = 2;
  s.validate();
  return s;
}

void l96_rhs(std::span<const double> x, double forcing, std::span<double> out) {
  const int d = (int)x.size();
  if (d < 4) throw Error("l96_rhs: D >= 4 required");
  for (int j = 0; j < d; ++j) {
    const int jp1 = j + 1 < d ? j + 1 : 0;
    const int jm1 = j - 1 >= 0 ? j - 1 : d - 1;
    const int jm2 = j - 2 >= 0 ? j - 2 : j - 2 + d;
    out[(size_t)j] = (x[(size_t)jp1] - x[(size_t)jm2]) * x[(size_t)jm1] - x[(size_t)j] + forcing;
  }
}

void vl20_rhs(std::span<const double> state, double f, double g, double alpha, double gamma,
              std::span<double> out) {
  const int jn = (int)state.size() / 2;
  if ((int)state.size() % 2 != 0 || jn < 4) throw Error("vl20_rhs: J >= 4 required");
  const double* x = state.data();
  const double* th = state.data() + jn;
  double* dx = out.data();
  double* dth = out.data() + jn;
  auto w = [jn](int j) { return ((j % jn) + jn) % jn; };
  for (int j = 0; j < jn; ++j) {
    dx[j] = x[w(j - 1)] * (x[w(j + 1)] - x[w(j - 2)]) - alpha * th[j] - gamma * x[j] + f;
    dth[j] = x[w(j + 1)] * th[w(j + 2)] - x[w(j - 1)] * th[w(j - 2)] + alpha * x[j] -
             gamma * th[j] + g;
  }
}

// ---------------------------------------------------------------------------
// Kuramoto-Sivashinsky / ETD-RK4

KsStepper::KsStepper(int n, double domain, double dt, bool nonlinear)
    : n_(n), dt_(dt), nonlinear_(nonlinear) {
  if (n < 8 || (n & (n - 1)) != 0) throw Error("KsStepper: N must be a power of two");
  if (domain <= 0.0) throw Error("KsStepper: domain length must be positive");
  cmat_.resize((size_t)n * n);
  smat_.resize((size_t)n * n);
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j) {
      const double ang = 2.0 * kPi * (double)((long)j * k % n) / n;
      cmat_[(size_t)k * n + j] = std::cos(ang);
      smat_[(size_t)k * n + j] = std::sin(ang);
    }

  khalf_.resize((size_t)n);
  lin_.resize((size_t)n);
  for (int k = 0; k < n; ++k) {
    const int m = k <= n / 2 ? k : k - n;
    const double kap = 2.0 * kPi * (double)m / domain;
    // Nyquist mode carries no well-defined odd derivative on the real grid.
    khalf_[(size_t)k] = (k == n / 2) ? 0.0 : 0.5 * kap;
    lin_[(size_t)k] = kap * kap - kap * kap * kap * kap;
  }

  // exp(L dt) and exp(L dt/2) directly; the phi-coefficients by averaging
  // over 32 points on a unit circle around L dt, which avoids cancellation
  // when |L dt| is small.
  e_.resize((size_t)n);
  e2_.resize((size_t)n);
  q_.resize((size_t)n);
  f1_.resize((size_t)n);
  f2_.resize((size_t)n);
  f3_.resize((size_t)n);
  const int m_pts = 32;
  for (int k = 0; k < n; ++k) {
    const double ldt = lin_[(size_t)k] * dt;
    e_[(size_t)k] = std::exp(ldt);
    e2_[(size_t)k] = std::exp(0.5 * ldt);
    std::complex<double> q(0.0), a1(0.0), a2(0.0), a3(0.0);
    for (int p = 0; p < m_pts; ++p) {
      const double theta = kPi * ((double)p + 0.5) / m_pts;
      const std::complex<double> z = std::complex<double>(ldt, 0.0) + std::polar(1.0, theta);
      const std::complex<double> ez = std::exp(z);
      const std::complex<double> z2 = z * z;
      const std::complex<double> z3 = z2 * z;
      q += (std::exp(z / 2.0) - 1.0) / z;
      a1 += (-4.0 - z + ez * (4.0 - 3.0 * z + z2)) / z3;
      a2 += (2.0 + z + ez * (-2.0 + z)) / z3;
      a3 += (-4.0 - 3.0 * z - z2 + ez * (4.0 - z)) / z3;
    }
    q_[(size_t)k] = dt * q.real() / m_pts;
    f1_[(size_t)k] = dt * a1.real() / m_pts;
    f2_[(size_t)k] = dt * a2.real() / m_pts;
    f3_[(size_t)k] = dt * a3.real() / m_pts;
  }
}

void KsStepper::fft(const double* u, double* re, double* im) const {
  for (int k = 0; k < n_; ++k) {
    const double* c = cmat_.data() + (size_t)k * n_;
    const double* s = smat_.data() + (size_t)k * n_;
    double ar = 0.0, ai = 0.0;
    for (int j = 0; j < n_; ++j) {
      ar += c[j] * u[j];
      ai -= s[j] * u[j];
    }
    re[k] = ar;
    im[k] = ai;
  }
}

void KsStepper::ifft_real(const double* re, const double* im, double* u) const {
  const double inv = 1.0 / n_;
  for (int j = 0; j < n_; ++j) {
    double acc = 0.0;
    for (int k = 0; k < n_; ++k)
      acc += cmat_[(size_t)k * n_ + j] * re[k] - smat_[(size_t)k * n_ + j] * im[k];
    u[j] = acc * inv;
  }
}

void KsStepper::nonlinear_term(const double* vre, const double* vim, double* nre,
                               double* nim) const {
  std::vector<double> w((size_t)n_), wre((size_t)n_), wim((size_t)n_);
  ifft_real(vre, vim, w.data());
  for (int j = 0; j < n_; ++j) w[(size_t)j] *= w[(size_t)j];
  fft(w.data(), wre.data(), wim.data());
  // N(v) = -0.5 i kappa fft(u^2)
  for (int k = 0; k < n_; ++k) {
    nre[k] = khalf_[(size_t)k] * wim[(size_t)k];
    nim[k] = -khalf_[(size_t)k] * wre[(size_t)k];
  }
}

void KsStepper::step(std::vector<double>& u) const {
  if ((int)u.size() != n_) throw Error("KsStepper: state size mismatch");
  const size_t n = (size_t)n_;
  std::vector<double> vre(n), vim(n);
  fft(u.data(), vre.data(), vim.data());

  if (!nonlinear_) {
    for (size_t k = 0; k < n; ++k) {
      vre[k] *= e_[k];
      vim[k] *= e_[k];
    }
    ifft_real(vre.data(), vim.data(), u.data());
    return;
  }

  std::vector<double> nv_re(n), nv_im(n), na_re(n), na_im(n), nb_re(n), nb_im(n), nc_re(n),
      nc_im(n);
  std::vector<double> are(n), aim(n), bre(n), bim(n), cre(n), cim(n);

  nonlinear_term(vre.data(), vim.data(), nv_re.data(), nv_im.data());
  for (size_t k = 0; k < n; ++k) {
    are[k] = e2_[k] * vre[k] + q_[k] * nv_re[k];
    aim[k] = e2_[k] * vim[k] + q_[k] * nv_im[k];
  }
  nonlinear_term(are.data(), aim.data(), na_re.data(), na_im.data());
  for (size_t k = 0; k < n; ++k) {
    bre[k] = e2_[k] * vre[k] + q_[k] * na_re[k];
    bim[k] = e2_[k] * vim[k] + q_[k] * na_im[k];
  }
  nonlinear_term(bre.data(), bim.data(), nb_re.data(), nb_im.data());
  for (size_t k = 0; k < n; ++k) {
    cre[k] = e2_[k] * are[k] + q_[k] * (2.0 * nb_re[k] - nv_re[k]);
    cim[k] = e2_[k] * aim[k] + q_[k] * (2.0 * nb_im[k] - nv_im[k]);
  }
  nonlinear_term(cre.data(), cim.data(), nc_re.data(), nc_im.data());
  for (size_t k = 0; k < n; ++k) {
    vre[k] = e_[k] * vre[k] + f1_[k] * nv_re[k] + 2.0 * f2_[k] * (na_re[k] + nb_re[k]) +
             f3_[k] * nc_re[k];
    vim[k] = e_[k] * vim[k] + f1_[k] * nv_im[k] + 2.0 * f2_[k] * (na_im[k] + nb_im[k]) +
             f3_[k] * nc_im[k];
  }
  ifft_real(vre.data(), vim.data(), u.data());
}

void KsStepper::rhs(const double* u, double* out) const {
  const size_t n = (size_t)n_;
  std::vector<double> vre(n), vim(n), dre(n), dim_(n), ux(n), lre(n), lim(n), lu(n);
  fft(u, vre.data(), vim.data());
  for (int k = 0; k < n_; ++k) {
    const double kap = 2.0 * khalf_[(size_t)k];
    dre[(size_t)k] = -kap * vim[(size_t)k];  // (i kappa v)_re
    dim_[(size_t)k] = kap * vre[(size_t)k];
    lre[(size_t)k] = lin_[(size_t)k] * vre[(size_t)k];
    lim[(size_t)k] = lin_[(size_t)k] * vim[(size_t)k];
  }
  ifft_real(dre.data(), dim_.data(), ux.data());
  ifft_real(lre.data(), lim.data(), lu.data());
  for (size_t j = 0; j < n; ++j) out[j] = lu[j] - u[j] * ux[j];
}

KsStepper::TapeCtx KsStepper::make_ctx(Tape& t, int m) const {
  TapeCtx ctx;
  ctx.m = m;
  ctx.cmat = t.input(Tensor({n_, n_}, cmat_));
  ctx.smat = t.input(Tensor({n_, n_}, smat_));
  auto rep = [&](const std::vector<double>& v) {
    Tensor tt({n_, m});
    for (int k = 0; k < n_; ++k)
      for (int j = 0; j < m; ++j) tt[(size_t)k * m + j] = v[(size_t)k];
    return t.input(std::move(tt));
  };
  ctx.coef = {rep(e_), rep(e2_), rep(q_), rep(f1_), rep(f2_), rep(f3_), rep(khalf_), rep(lin_)};
  return ctx;
}

Var KsStepper::rhs_t(Tape& t, const TapeCtx& ctx, Var u) const {
  const Tensor& tu = t.val(u);
  if (tu.rank() != 3 || tu.dim(0) != 1 || tu.dim(2) != n_ || tu.dim(1) != ctx.m)
    throw Error("KsStepper::rhs_t: expected [1][m][N] matching ctx");
  const int m = ctx.m;
  const Var KH = ctx.coef[6], LIN = ctx.coef[7];
  const double inv_n = 1.0 / n_;

  Var umat = t.transpose2(t.reshape(u, {m, n_}));  // [N][m]
  Var vre = t.matmul(ctx.cmat, umat);
  Var vim = t.scalar_mul(t.matmul(ctx.smat, umat), -1.0);
  auto ifft_re = [&](Var re, Var im) {
    return t.scalar_mul(t.sub(t.matmul(ctx.cmat, re), t.matmul(ctx.smat, im)), inv_n);
  };
  // u_x from (i kappa) v, with kappa = 2*khalf
  Var dre = t.scalar_mul(t.mul(KH, vim), -2.0);
  Var dim = t.scalar_mul(t.mul(KH, vre), 2.0);
  Var ux = ifft_re(dre, dim);
  Var lu = ifft_re(t.mul(LIN, vre), t.mul(LIN, vim));
  Var g = t.sub(lu, t.mul(umat, ux));
  return t.reshape(t.transpose2(g), {1, m, n_});
}

Var KsStepper::step_t(Tape& t, const TapeCtx& ctx, Var u) const {
  const Tensor& tu = t.val(u);
  if (tu.rank() != 3 || tu.dim(0) != 1 || tu.dim(2) != n_ || tu.dim(1) != ctx.m)
    throw Error("KsStepper::step_t: expected [1][m][N] matching ctx");
  const int m = ctx.m;
  const Var E = ctx.coef[0], E2 = ctx.coef[1], Q = ctx.coef[2];
  const Var F1 = ctx.coef[3], F2 = ctx.coef[4], F3 = ctx.coef[5], KH = ctx.coef[6];
  const double inv_n = 1.0 / n_;

  Var umat = t.transpose2(t.reshape(u, {m, n_}));  // [N][m], members as columns
  Var vre = t.matmul(ctx.cmat, umat);
  Var vim = t.scalar_mul(t.matmul(ctx.smat, umat), -1.0);

  auto ifft_re = [&](Var re, Var im) {
    return t.scalar_mul(t.sub(t.matmul(ctx.cmat, re), t.matmul(ctx.smat, im)), inv_n);
  };
  auto nl = [&](Var re, Var im) -> std::pair<Var, Var> {
    Var w = ifft_re(re, im);
    Var w2 = t.mul(w, w);
    Var wre = t.matmul(ctx.cmat, w2);
    Var wim = t.scalar_mul(t.matmul(ctx.smat, w2), -1.0);
    return {t.mul(KH, wim), t.scalar_mul(t.mul(KH, wre), -1.0)};
  };

  Var out_re, out_im;
  if (!nonlinear_) {
    out_re = t.mul(E, vre);
    out_im = t.mul(E, vim);
  } else {
    auto [nv_re, nv_im] = nl(vre, vim);
    Var are = t.add(t.mul(E2, vre), t.mul(Q, nv_re));
    Var aim = t.add(t.mul(E2, vim), t.mul(Q, nv_im));
    auto [na_re, na_im] = nl(are, aim);
    Var bre = t.add(t.mul(E2, vre), t.mul(Q, na_re));
    Var bim = t.add(t.mul(E2, vim), t.mul(Q, na_im));
    auto [nb_re, nb_im] = nl(bre, bim);
    Var crev = t.add(t.mul(E2, are), t.mul(Q, t.sub(t.scalar_mul(nb_re, 2.0), nv_re)));
    Var cimv = t.add(t.mul(E2, aim), t.mul(Q, t.sub(t.scalar_mul(nb_im, 2.0), nv_im)));
    auto [nc_re, nc_im] = nl(crev, cimv);
    out_re = t.add(t.add(t.mul(E, vre), t.mul(F1, nv_re)),
                   t.add(t.scalar_mul(t.mul(F2, t.add(na_re, nb_re)), 2.0), t.mul(F3, nc_re)));
    out_im = t.add(t.add(t.mul(E, vim), t.mul(F1, nv_im)),
                   t.add(t.scalar_mul(t.mul(F2, t.add(na_im, nb_im)), 2.0), t.mul(F3, nc_im)));
  }
  Var unew = ifft_re(out_re, out_im);                 // [N][m]
  return t.reshape(t.transpose2(unew), {1, m, n_});
}

// ---------------------------------------------------------------------------
// Integrator

Integrator::Integrator(SystemSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  if (spec_.kind == SystemKind::KS)
    ks_ = std::make_unique<KsStepper>(spec_.dimension, spec_.ks_domain, spec_.dt);
}

void Integrator::rhs(const double* x, double* out) const {
  const int d = spec_.dimension;
  switch (spec_.kind) {
    case SystemKind::L96:
      l96_rhs(std::span<const double>(x, (size_t)d), spec_.forcing,
              std::span<double>(out, (size_t)d));
      break;
    case SystemKind::VL20:
      vl20_rhs(std::span<const double>(x, (size_t)d), spec_.forcing, spec_.vl20_g,
               spec_.vl20_alpha, spec_.vl20_gamma, std::span<double>(out, (size_t)d));
      break;
    case SystemKind::KS:
      ks_->rhs(x, out);
      break;
  }
}

void Integrator::step(std::vector<double>& x) const {
  if ((int)x.size() != spec_.dimension) throw Error("Integrator: state dimension mismatch");
  if (spec_.kind == SystemKind::KS) {
    ks_->step(x);
    return;
  }
  std::vector<double> out(x.size());
  auto f = [this](std::span<const double> in, std::span<double> o) { rhs(in.data(), o.data()); };
  rk4_step(f, std::span<const double>(x), spec_.dt, std::span<double>(out));
  x.swap(out);
}

void Integrator::steps(std::vector<double>& x, int n, long step_base) const {
  for (int i = 0; i < n; ++i) {
    step(x);
    for (double v : x)
      if (!(std::abs(v) <= kBlowupGuard))
        throw BlowupError("integration blowup: |x| exceeds guard", step_base + i + 1);
  }
}

Trajectory Integrator::integrate(const std::vector<double>& x0, int n_steps) const {
  if ((int)x0.size() != spec_.dimension) throw Error("integrate: x0 dimension mismatch");
  Trajectory traj;
  traj.times.reserve((size_t)n_steps + 1);
  traj.states.reserve((size_t)n_steps + 1);
  std::vector<double> x = x0;
  traj.times.push_back(0.0);
  traj.states.push_back(x);
  for (int i = 0; i < n_steps; ++i) {
    steps(x, 1, i);
    traj.times.push_back(spec_.dt * (i + 1));
    traj.states.push_back(x);
  }
  return traj;
}

Var Integrator::rhs_t(Tape& t, Var x) const {
  switch (spec_.kind) {
    case SystemKind::L96: {
      // (x_{j+1} - x_{j-2}) x_{j-1} - x_j + F
      Var adv = t.mul(t.sub(t.roll(x, -1), t.roll(x, 2)), t.roll(x, 1));
      return t.add_scalar(t.sub(adv, x), spec_.forcing);
    }
    case SystemKind::VL20: {
      Var xb = t.slice(x, 0, 1);
      Var th = t.slice(x, 1, 1);
      Var dx = t.add_scalar(
          t.sub(t.sub(t.mul(t.roll(xb, 1), t.sub(t.roll(xb, -1), t.roll(xb, 2))),
                      t.scalar_mul(th, spec_.vl20_alpha)),
                t.scalar_mul(xb, spec_.vl20_gamma)),
          spec_.forcing);
      Var dth = t.add_scalar(
          t.sub(t.add(t.sub(t.mul(t.roll(xb, -1), t.roll(th, -2)),
                            t.mul(t.roll(xb, 1), t.roll(th, 2))),
                      t.scalar_mul(xb, spec_.vl20_alpha)),
                t.scalar_mul(th, spec_.vl20_gamma)),
          spec_.vl20_g);
      return t.concat({dx, dth});
    }
    case SystemKind::KS:
      throw Error("Integrator: KS has no RK4 tendency path; use step_t");
  }
  throw Error("Integrator: unknown kind");
}

Var Integrator::step_t(Tape& t, Var x) const {
  if (spec_.kind == SystemKind::KS) {
    const auto ctx = ks_->make_ctx(t, t.val(x).dim(1));
    return ks_->step_t(t, ctx, x);
  }
  const double dt = spec_.dt;
  Var k1 = rhs_t(t, x);
  Var k2 = rhs_t(t, t.add(x, t.scalar_mul(k1, 0.5 * dt)));
  Var k3 = rhs_t(t, t.add(x, t.scalar_mul(k2, 0.5 * dt)));
  Var k4 = rhs_t(t, t.add(x, t.scalar_mul(k3, dt)));
  Var sum = t.add(t.add(k1, t.scalar_mul(t.add(k2, k3), 2.0)), k4);
  return t.add(x, t.scalar_mul(sum, dt / 6.0));
}

Var Integrator::tendency_t(Tape& t, Var x) const {
  if (spec_.kind == SystemKind::KS) {
    const auto ctx = ks_->make_ctx(t, t.val(x).dim(1));
    return ks_->rhs_t(t, ctx, x);
  }
  return rhs_t(t, x);
}

Var Integrator::steps_t(Tape& t, Var x, int n, long step_base) const {
  KsStepper::TapeCtx ctx;
  if (spec_.kind == SystemKind::KS) ctx = ks_->make_ctx(t, t.val(x).dim(1));
  for (int i = 0; i < n; ++i) {
    x = spec_.kind == SystemKind::KS ? ks_->step_t(t, ctx, x) : step_t(t, x);
    const Tensor& v = t.val(x);
    for (int k = 0; k < v.size(); ++k)
      if (!(std::abs(v[k]) <= kBlowupGuard))
        throw BlowupError("integration blowup: |x| exceeds guard", step_base + i + 1);
  }
  return x;
}

Trajectory integrate(const SystemSpec& spec, const std::vector<double>& x0, int n_steps) {
  return Integrator(spec).integrate(x0, n_steps);
}

}  // namespace amortda
