#pragma once

#include <memory>
#include <span>
#include <vector>

#include "amortda/common.hpp"
#include "amortda/tape.hpp"

namespace amortda {

enum class SystemKind { L96, VL20, KS };

/// Configuration of a benchmark system: which equations, resolution, step
/// size, and how many integrator steps separate consecutive observations.
struct SystemSpec {
  SystemKind kind = SystemKind::L96;
  int dimension = 40;  // full state dimension: D (L96), 2J (VL20), N (KS)
  double dt = 0.05;
  int steps_per_observation = 2;
  double forcing = 8.0;  // F
  double vl20_g = 10.0;
  double vl20_alpha = 1.0;
  double vl20_gamma = 1.0;
  double ks_domain = 32.0 * 3.14159265358979323846;

  void validate() const;
  /// Field variables per spatial site (VL20 carries X and theta).
  int state_channels() const { return kind == SystemKind::VL20 ? 2 : 1; }
  int spatial_dim() const { return kind == SystemKind::VL20 ? dimension / 2 : dimension; }

  static SystemSpec l96(int d = 40, double f = 8.0);
  static SystemSpec vl20(int j = 36);
  static SystemSpec ks(int n = 128);
};

struct Trajectory {
  std::vector<double> times;
  std::vector<std::vector<double>> states;
};

/// Lorenz 96 tendency: dx_j/dt = (x_{j+1} - x_{j-2}) x_{j-1} - x_j + F,
/// periodic indexing. Requires D >= 4.
void l96_rhs(std::span<const double> x, double forcing, std::span<double> out);

/// Vissio-Lucarini 20 tendency on state (X_1..X_J, theta_1..theta_J):
///   dX_j/dt     = X_{j-1}(X_{j+1} - X_{j-2}) - alpha theta_j - gamma X_j + F
///   dtheta_j/dt = X_{j+1} theta_{j+2} - X_{j-1} theta_{j-2} + alpha X_j - gamma theta_j + G
/// Requires J >= 4.
void vl20_rhs(std::span<const double> state, double f, double g, double alpha, double gamma,
              std::span<double> out);

/// Classical RK4 step for a generic autonomous tendency.
template <class Rhs>
void rk4_step(Rhs&& rhs, std::span<const double> x, double dt, std::span<double> out) {
  const size_t n = x.size();
  std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n);
  rhs(std::span<const double>(x), std::span<double>(k1));
  for (size_t i = 0; i < n; ++i) tmp[i] = x[i] + 0.5 * dt * k1[i];
  rhs(std::span<const double>(tmp), std::span<double>(k2));
  for (size_t i = 0; i < n; ++i) tmp[i] = x[i] + 0.5 * dt * k2[i];
  rhs(std::span<const double>(tmp), std::span<double>(k3));
  for (size_t i = 0; i < n; ++i) tmp[i] = x[i] + dt * k3[i];
  rhs(std::span<const double>(tmp), std::span<double>(k4));
  for (size_t i = 0; i < n; ++i)
    out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
}

/// Kuramoto-Sivashinsky u_t = -u_xx - u_xxxx - u u_x on a periodic domain,
/// advanced with ETD-RK4 (exact integrating factor for the linear part,
/// RK4-like treatment of the nonlinear term, coefficients by contour
/// integration). The spectral transform is a dense DFT matrix so the tape
/// path reduces to matmul and elementwise primitives.
class KsStepper {
 public:
  KsStepper(int n, double domain, double dt, bool nonlinear = true);

  void step(std::vector<double>& u) const;
  /// g(u) = -u_xx - u_xxxx - u u_x, evaluated spectrally.
  void rhs(const double* u, double* out) const;

  struct TapeCtx {
    Var cmat, smat;  // DFT cos/sin matrices [N][N]
    std::vector<Var> coef;  // E, E2, Q, f1, f2, f3, khalf, lin broadcast to [N][m]
    int m = 0;
  };
  TapeCtx make_ctx(Tape& t, int m) const;
  /// u [1][m][N] -> [1][m][N]
  Var step_t(Tape& t, const TapeCtx& ctx, Var u) const;
  /// g(u) on tape, same layout.
  Var rhs_t(Tape& t, const TapeCtx& ctx, Var u) const;

 private:
  void fft(const double* u, double* re, double* im) const;
  void ifft_real(const double* re, const double* im, double* u) const;
  void nonlinear_term(const double* vre, const double* vim, double* nre, double* nim) const;

  int n_;
  double dt_;
  bool nonlinear_;
  std::vector<double> cmat_, smat_;                    // [N][N]
  std::vector<double> e_, e2_, q_, f1_, f2_, f3_;      // [N]
  std::vector<double> khalf_;                          // 0.5 * signed wavenumber, Nyquist zeroed
  std::vector<double> lin_;                            // kappa^2 - kappa^4
};

/// Time stepping for any SystemSpec, plain and on-tape, with a blowup guard
/// (|x_i| > 1e6 raises BlowupError carrying the step index).
class Integrator {
 public:
  explicit Integrator(SystemSpec spec);
  const SystemSpec& spec() const { return spec_; }

  void rhs(const double* x, double* out) const;
  void step(std::vector<double>& x) const;
  void steps(std::vector<double>& x, int n, long step_base = 0) const;
  Trajectory integrate(const std::vector<double>& x0, int n_steps) const;

  /// x [C][m][Dsp]; rolls/slices express the stencils so gradients flow.
  Var step_t(Tape& t, Var x) const;
  Var steps_t(Tape& t, Var x, int n, long step_base = 0) const;
  /// Differentiable tendency g(x) in the same layout (all system kinds).
  Var tendency_t(Tape& t, Var x) const;

  static constexpr double kBlowupGuard = 1e6;

 private:
  Var rhs_t(Tape& t, Var x) const;
  SystemSpec spec_;
  std::unique_ptr<KsStepper> ks_;
};

/// Deterministic trajectory of n_steps+1 states including x0.
Trajectory integrate(const SystemSpec& spec, const std::vector<double>& x0, int n_steps);

}  // namespace amortda
