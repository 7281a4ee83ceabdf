/* Vectorizable phasor accumulation for one (image-)scatterer over all pixels.
 *
 * The phase is reduced to a fraction of a cycle, split into a quadrant and a
 * residual angle in [-pi/4, pi/4], and sin/cos of the residual come from
 * Taylor polynomials (truncation < 1e-16). Must be compiled with
 * -ffp-contract=off so results match the numpy twin bit for bit.
 */
#ifndef SPECKLETACT_PHASOR_H
#define SPECKLETACT_PHASOR_H

#include <math.h>
#include <stddef.h>

#define ST_TWO_PI 6.283185307179586

static inline void st_accumulate_phasors(
    const double *restrict pxs, const double *restrict pys, const double *restrict pzs,
    ptrdiff_t n, double qx, double qy, double qz, double d1, double a, double nu,
    double dmin, double *restrict re, double *restrict im)
{
    for (ptrdiff_t p = 0; p < n; p++) {
        double dx = pxs[p] - qx;
        double dy = pys[p] - qy;
        double dz = pzs[p] - qz;
        double d2 = sqrt(dx * dx + dy * dy + dz * dz);
        d2 = d2 < dmin ? dmin : d2;
        double amp = a / (d1 * d2);
        double cyc = nu * (d1 + d2);
        double t = cyc - floor(cyc);
        double quad = floor(4.0 * t + 0.5);
        double th = ST_TWO_PI * (t - 0.25 * quad);
        double z = th * th;
        double s = th * (1.0 + z * (-1.6666666666666666e-01 + z * (8.3333333333333332e-03
                   + z * (-1.9841269841269841e-04 + z * (2.7557319223985893e-06
                   + z * (-2.5052108385441720e-08 + z * (1.6059043836821613e-10
                   + z * (-7.6471637318198164e-13))))))));
        double c = 1.0 + z * (-0.5 + z * (4.1666666666666664e-02 + z * (-1.3888888888888889e-03
                   + z * (2.4801587301587302e-05 + z * (-2.7557319223985888e-07
                   + z * (2.0876756987868100e-09 + z * (-1.1470745597729725e-11
                   + z * (4.7794773323873853e-14))))))));
        /* rotate by quad quarter turns: swap on odd quadrants, then fix signs */
        double q4 = quad - 4.0 * floor(0.25 * quad);
        double odd = q4 - 2.0 * floor(0.5 * q4);
        double u = odd > 0.5 ? s : c;
        double v = odd > 0.5 ? c : s;
        double sign_re = (q4 > 0.5 && q4 < 2.5) ? -1.0 : 1.0;
        double sign_im = q4 > 1.5 ? -1.0 : 1.0;
        double cr = sign_re * u;
        double sr = sign_im * v;
        re[p] += amp * cr;
        im[p] += amp * sr;
    }
}

#endif
