/* Direct dilated 3D convolution kernels (stride 1, contiguous NCDHW arrays).
 *
 *   out[n,o,z,y,x] += sum_{i,a,b,c} w[o,i,a,b,c] *
 *                     xp[n,i, z+d(k-1-a), y+d(k-1-b), x+d(k-1-c)]
 *
 * xp is already zero padded. Register tiles of 4 output channels by 8..32
 * voxels use GCC vector extensions, so the compiler picks the widest SIMD
 * the target offers. Every sum runs in a fixed order: results are
 * reproducible bit for bit for a given build.
 */
#ifndef NUCLEUS3D_CONV_H
#define NUCLEUS3D_CONV_H

#include <string.h>

typedef double n3d_v8 __attribute__((vector_size(64)));

#define N3D_INLINE static inline __attribute__((always_inline))

N3D_INLINE n3d_v8 n3d_ld(const double *p)
{
    n3d_v8 v;
    memcpy(&v, p, sizeof(v));
    return v;
}

N3D_INLINE void n3d_add_to(double *p, n3d_v8 a)
{
    n3d_v8 v;
    memcpy(&v, p, sizeof(v));
    v += a;
    memcpy(p, &v, sizeof(v));
}

N3D_INLINE double n3d_hsum(n3d_v8 v)
{
    return ((v[0] + v[1]) + (v[2] + v[3])) + ((v[4] + v[5]) + (v[6] + v[7]));
}

/* 4 output channels x (8 * NV) voxels of one output row. */
N3D_INLINE void n3d_fwd_tile(const double *restrict xpn, const double *const wq[4],
                             double *const dq[4], long nb, long Ci, long Dp, long Hp, long Wp,
                             long z, long y, long xc, long k, long d, const int NV)
{
    const long k3 = k * k * k;
    n3d_v8 acc[4][4];
    for (int q = 0; q < 4; q++)
        for (int v = 0; v < NV; v++)
            acc[q][v] = (n3d_v8){0};
    for (long i = 0; i < Ci; i++)
    for (long a = 0; a < k; a++)
    for (long b = 0; b < k; b++) {
        const double *row = xpn + ((i * Dp + z + d * (k - 1 - a)) * Hp + y + d * (k - 1 - b)) * Wp + xc;
        for (long c = 0; c < k; c++) {
            const double *s = row + d * (k - 1 - c);
            const long t = i * k3 + (a * k + b) * k + c;
            n3d_v8 sv[4];
            for (int v = 0; v < NV; v++)
                sv[v] = n3d_ld(s + 8 * v);
            for (int q = 0; q < 4; q++) {
                const double wt = wq[q][t];
                for (int v = 0; v < NV; v++)
                    acc[q][v] += wt * sv[v];
            }
        }
    }
    for (int q = 0; q < nb; q++)
        for (int v = 0; v < NV; v++)
            n3d_add_to(dq[q] + xc + 8 * v, acc[q][v]);
}

/* Scalar path for the last (< 8) voxels of a row. */
N3D_INLINE void n3d_fwd_tail(const double *restrict xpn, const double *const wq[4],
                             double *const dq[4], long nb, long Ci, long Dp, long Hp, long Wp,
                             long z, long y, long x0, long Wo, long k, long d)
{
    const long k3 = k * k * k;
    for (long x = x0; x < Wo; x++) {
        double acc[4] = {0.0, 0.0, 0.0, 0.0};
        for (long i = 0; i < Ci; i++)
        for (long a = 0; a < k; a++)
        for (long b = 0; b < k; b++) {
            const double *row = xpn + ((i * Dp + z + d * (k - 1 - a)) * Hp + y + d * (k - 1 - b)) * Wp + x;
            for (long c = 0; c < k; c++) {
                const double s = row[d * (k - 1 - c)];
                const long t = i * k3 + (a * k + b) * k + c;
                for (int q = 0; q < 4; q++)
                    acc[q] += wq[q][t] * s;
            }
        }
        for (int q = 0; q < nb; q++)
            dq[q][x] += acc[q];
    }
}

/* zeros: Ci*k^3 zero weights standing in for missing channels of the last block. */
static void n3d_conv3d_forward(const double *restrict xp, const double *restrict w,
                               const double *restrict zeros, double *restrict out,
                               long N, long Ci, long Co, long Dp, long Hp, long Wp,
                               long Do, long Ho, long Wo, long k, long d)
{
    const long k3 = k * k * k;
    for (long n = 0; n < N; n++) {
        const double *xpn = xp + n * Ci * Dp * Hp * Wp;
        for (long o = 0; o < Co; o += 4) {
            const long nb = (o + 4 <= Co) ? 4 : Co - o;
            const double *wq[4];
            for (int q = 0; q < 4; q++)
                wq[q] = (q < nb) ? w + (o + q) * Ci * k3 : zeros;
            for (long z = 0; z < Do; z++)
            for (long y = 0; y < Ho; y++) {
                double *dq[4];
                for (int q = 0; q < 4; q++)
                    dq[q] = out + (((n * Co + o + (q < nb ? q : 0)) * Do + z) * Ho + y) * Wo;
                long xc = 0;
                for (; xc + 32 <= Wo; xc += 32)
                    n3d_fwd_tile(xpn, wq, dq, nb, Ci, Dp, Hp, Wp, z, y, xc, k, d, 4);
                if (xc + 16 <= Wo) {
                    n3d_fwd_tile(xpn, wq, dq, nb, Ci, Dp, Hp, Wp, z, y, xc, k, d, 2);
                    xc += 16;
                }
                if (xc + 8 <= Wo) {
                    n3d_fwd_tile(xpn, wq, dq, nb, Ci, Dp, Hp, Wp, z, y, xc, k, d, 1);
                    xc += 8;
                }
                if (xc < Wo)
                    n3d_fwd_tail(xpn, wq, dq, nb, Ci, Dp, Hp, Wp, z, y, xc, Wo, k, d);
            }
        }
    }
}

/* gw[o,i,a,b,c] += sum_{n,z,y,x} g[n,o,z,y,x] * xp[n,i,z+d(k-1-a),y+d(k-1-b),x+d(k-1-c)]
 * Blocks of 8 output channels share each input-row load; partial sums are
 * kept per (n, z) plane. */
static void n3d_conv3d_backward_weight(const double *restrict g, const double *restrict xp,
                                       double *restrict gw, long N, long Ci, long Co,
                                       long Dp, long Hp, long Wp, long Do, long Ho, long Wo,
                                       long k, long d)
{
    const long k3 = k * k * k;
    for (long n = 0; n < N; n++)
    for (long z = 0; z < Do; z++)
    for (long o = 0; o < Co; o += 8) {
        const long nb = (o + 8 <= Co) ? 8 : Co - o;
        for (long i = 0; i < Ci; i++)
        for (long a = 0; a < k; a++)
        for (long b = 0; b < k; b++)
        for (long c = 0; c < k; c++) {
            n3d_v8 acc[8];
            double tail[8];
            for (int q = 0; q < 8; q++) {
                acc[q] = (n3d_v8){0};
                tail[q] = 0.0;
            }
            for (long y = 0; y < Ho; y++) {
                const double *s = xp + (((n * Ci + i) * Dp + z + d * (k - 1 - a)) * Hp
                                        + y + d * (k - 1 - b)) * Wp + d * (k - 1 - c);
                const double *gq[8];
                for (int q = 0; q < 8; q++)
                    gq[q] = g + (((n * Co + o + (q < nb ? q : 0)) * Do + z) * Ho + y) * Wo;
                long x = 0;
                for (; x + 8 <= Wo; x += 8) {
                    const n3d_v8 sv = n3d_ld(s + x);
                    for (int q = 0; q < 8; q++)
                        acc[q] += n3d_ld(gq[q] + x) * sv;
                }
                for (; x < Wo; x++)
                    for (int q = 0; q < 8; q++)
                        tail[q] += gq[q][x] * s[x];
            }
            for (int q = 0; q < nb; q++)
                gw[(o + q) * Ci * k3 + i * k3 + (a * k + b) * k + c] += n3d_hsum(acc[q]) + tail[q];
        }
    }
}

#endif
