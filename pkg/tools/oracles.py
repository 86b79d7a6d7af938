"""One-time oracle computations whose outputs are frozen into the test suite.

Run as a script; each block prints a labelled value. These are computed by
methods independent of the library implementation (Fourier quadrature, closed
forms, radial integrals), so the tests they feed stay meaningful.
"""

import numpy as np
import mpmath as mp


def green_origin_closed_form_d3():
    """Watson's product formula for the expected visits to the origin, d=3."""
    mp.mp.dps = 30
    v = (mp.sqrt(6) / (32 * mp.pi**3)) * mp.gamma(mp.mpf(1) / 24) * mp.gamma(
        mp.mpf(5) / 24
    ) * mp.gamma(mp.mpf(7) / 24) * mp.gamma(mp.mpf(11) / 24)
    return v


def green_origin_fourier_d3(n=160):
    """Gauss-Legendre quadrature of the Fourier integral for g(0), d=3.

    g(0) = (2 pi)^{-3} int_{[-pi,pi]^3} dk / (1 - (cos k1 + cos k2 + cos k3)/3).

    The integrand has an integrable 1/|k|^2 singularity at 0. We subtract
    6/|k|^2, integrate the smooth remainder by tensor Gauss-Legendre on the
    positive octant, and add back the cube integral of 6/|k|^2 computed by a
    semi-analytic reduction (innermost axis integrates to arctan in closed
    form; the remaining 2D integral is polar and smooth).
    """
    from scipy.integrate import dblquad

    x, w = np.polynomial.legendre.leggauss(n)
    k = 0.5 * np.pi * (x + 1.0)
    wk = 0.5 * np.pi * w
    K1, K2, K3 = np.meshgrid(k, k, k, indexing="ij", sparse=True)
    phi = (np.cos(K1) + np.cos(K2) + np.cos(K3)) / 3.0
    r2 = K1**2 + K2**2 + K3**2
    smooth = 1.0 / (1.0 - phi) - 6.0 / r2
    W = wk[:, None, None] * wk[None, :, None] * wk[None, None, :]
    part_smooth = float(np.sum(smooth * W)) * 8.0 / (2 * np.pi) ** 3

    # int over the cube of 6/|k|^2: z-axis closed form, then 2D in polar.
    def integrand(rho, theta):
        return 6.0 * np.arctan(np.pi / rho) / rho * rho  # jacobian rho

    # the square (0,pi)^2 in polar: split at the diagonal by symmetry
    def rmax(theta):
        return np.pi / np.cos(theta)

    val, _err = dblquad(
        lambda r, t: 6.0 * np.arctan(np.pi / r), 0, np.pi / 4, 0, rmax, epsabs=1e-13
    )
    part_sing = 2.0 * val * 8.0 / (2 * np.pi) ** 3  # two octant halves, 8 octants
    return part_smooth + part_sing, part_smooth, part_sing


def truncated_radial_energy(r=0.5, S=6.0, d=3):
    """Dirichlet energy (1/2d normalization) of min(1, r/|x|) inside [-S,S]^3.

    Full-space value is (d-2) * omega_{d-1} * r^{d-2} / (2d) = 4 pi r / 6 for
    d=3; the box truncation removes int_{outside box} |grad|^2 = r^2 J where
    J = int_{R^3 \\ [-S,S]^3} |x|^{-4} dx, computed here by spherical shells.
    """
    from scipy.integrate import tplquad

    def f(z, y, x):
        return (x * x + y * y + z * z) ** -2

    # Complement of the cube = union of the 6 half-spaces {x_i > S} / {x_i < -S};
    # inclusion-exclusion gives J = 6*I_face - 12*I_edge + 8*I_corner.
    inf = np.inf
    I_face, _ = tplquad(f, S, inf, -inf, inf, -inf, inf, epsabs=1e-11, epsrel=1e-11)
    I_edge, _ = tplquad(f, S, inf, S, inf, -inf, inf, epsabs=1e-11, epsrel=1e-11)
    I_corner, _ = tplquad(f, S, inf, S, inf, S, inf, epsabs=1e-11, epsrel=1e-11)
    J = 6 * I_face - 12 * I_edge + 8 * I_corner
    full = 4 * np.pi * r / (2 * d)
    trunc = full - r * r * J / (2 * d)
    return full, trunc, J


def ball_oracle_target(u=0.25, ustar=1.0, nu=0.05, d=3):
    """Closed-form target for the indicator-profile minimization.

    Optimal profile is (sqrt(ustar)-sqrt(u)) h_ball on the ball of volume
    nu * 2^d; energy = (sqrt(ustar)-sqrt(u))^2 / (2d) * (d-2) omega_{d-1} r^{d-2}.
    """
    r = (nu * 2**d * 3 / (4 * np.pi)) ** (1.0 / 3)
    delta = np.sqrt(ustar) - np.sqrt(u)
    return r, delta**2 * 4 * np.pi * r / (2 * d)


if __name__ == "__main__":
    g0 = green_origin_closed_form_d3()
    print(f"g(0) closed form (d=3): {mp.nstr(g0, 18)}")
    tot, sm, sg = green_origin_fourier_d3()
    print(f"g(0) Fourier quadrature: {tot!r} (smooth {sm!r} + singular {sg!r})")
    print(f"far-field constant d=3: {3 / (2 * np.pi)!r}")
    full, trunc, J = truncated_radial_energy()
    print(f"radial energy full-space: {full!r}")
    print(f"radial energy box-truncated (S=6): {trunc!r}  (J={J!r})")
    r, e = ball_oracle_target()
    print(f"ball oracle: r_nu={r!r} energy={e!r}")
