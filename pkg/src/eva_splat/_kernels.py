"""Numba kernels for tile binning, tiled alpha blending and its adjoint.

Blending rule (shared with the oracle): for Gaussians in front-to-back order,
``alpha = min(0.99, opacity * exp(power))``; skip when ``alpha < 1/255``;
composite, then stop once transmittance has fallen below ``1e-4``.
"""

import numba as nb
import numpy as np

nb.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


@nb.njit(cache=True)
def bin_gaussians(order, px0, px1, py0, py1, tiles_x, n_tiles):
    """Per-tile Gaussian lists, each in the global depth order given by ``order``.

    ``px0..py1`` are inclusive pixel ranges (already clipped; empty if px1 < px0).
    Returns CSR-style ``(tile_start, tile_gauss)``.
    """
    counts = np.zeros(n_tiles, dtype=np.int64)
    for g in order:
        if px1[g] < px0[g] or py1[g] < py0[g]:
            continue
        for ty in range(py0[g] // TILE, py1[g] // TILE + 1):
            for tx in range(px0[g] // TILE, px1[g] // TILE + 1):
                counts[ty * tiles_x + tx] += 1
    start = np.zeros(n_tiles + 1, dtype=np.int64)
    for i in range(n_tiles):
        start[i + 1] = start[i] + counts[i]
    fill = start[:-1].copy()
    gauss = np.empty(start[-1], dtype=np.int64)
    for g in order:
        if px1[g] < px0[g] or py1[g] < py0[g]:
            continue
        for ty in range(py0[g] // TILE, py1[g] // TILE + 1):
            for tx in range(px0[g] // TILE, px1[g] // TILE + 1):
                t = ty * tiles_x + tx
                gauss[fill[t]] = g
                fill[t] += 1
    return start, gauss


@nb.njit(parallel=True, cache=True)
def forward_tiles(means, conics, opacities, colors, feats, depths, bg,
                  tile_start, tile_gauss, width, height, tiles_x,
                  out_color, out_feat, out_depth, out_T, out_wsum):
    """Tiled forward pass. Weights and transmittance in float64, sums in float32."""
    n_tiles = tile_start.shape[0] - 1
    nf = feats.shape[1]
    for tile in nb.prange(n_tiles):
        tx0 = (tile % tiles_x) * TILE
        ty0 = (tile // tiles_x) * TILE
        s, e = tile_start[tile], tile_start[tile + 1]
        for py in range(ty0, min(ty0 + TILE, height)):
            for px in range(tx0, min(tx0 + TILE, width)):
                cx = px + 0.5
                cy = py + 0.5
                T = 1.0
                wsum = 0.0
                c0 = np.float32(0.0)
                c1 = np.float32(0.0)
                c2 = np.float32(0.0)
                dep = np.float32(0.0)
                fpix = np.zeros(nf, dtype=np.float32)
                for k in range(s, e):
                    g = tile_gauss[k]
                    dx = cx - means[g, 0]
                    dy = cy - means[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    alpha = min(ALPHA_MAX, opacities[g] * np.exp(power))
                    if alpha < ALPHA_MIN:
                        continue
                    w = alpha * T
                    w32 = np.float32(w)
                    c0 += w32 * colors[g, 0]
                    c1 += w32 * colors[g, 1]
                    c2 += w32 * colors[g, 2]
                    dep += w32 * depths[g]
                    for f in range(nf):
                        fpix[f] += w32 * feats[g, f]
                    wsum += w
                    T = T * (1.0 - alpha)
                    if T < T_MIN:
                        break
                T32 = np.float32(T)
                out_color[py, px, 0] = c0 + T32 * bg[0]
                out_color[py, px, 1] = c1 + T32 * bg[1]
                out_color[py, px, 2] = c2 + T32 * bg[2]
                out_depth[py, px] = dep
                out_T[py, px] = T
                out_wsum[py, px] = wsum
                for f in range(nf):
                    out_feat[py, px, f] = fpix[f]


@nb.njit(parallel=True, cache=True)
def backward_tiles(means, conics, opacities, colors, feats, depths, bg,
                   tile_start, tile_gauss, width, height, tiles_x,
                   d_color, d_feat, d_depth, d_T,
                   g_mean, g_conic, g_opacity, g_color, g_feat, g_depth):
    """Adjoint of :func:`forward_tiles` in float64.

    Gradients are written per (tile, list entry) into ``g_*[k]`` so no two
    tiles share an output slot; the caller reduces them in a fixed order.
    """
    n_tiles = tile_start.shape[0] - 1
    nf = feats.shape[1]
    for tile in nb.prange(n_tiles):
        tx0 = (tile % tiles_x) * TILE
        ty0 = (tile // tiles_x) * TILE
        s, e = tile_start[tile], tile_start[tile + 1]
        n = e - s
        used = np.empty(n, dtype=np.int64)
        alphas = np.empty(n)
        Ts = np.empty(n)
        for py in range(ty0, min(ty0 + TILE, height)):
            for px in range(tx0, min(tx0 + TILE, width)):
                cx = px + 0.5
                cy = py + 0.5
                # replay forward, recording the contributing entries
                T = 1.0
                m = 0
                for k in range(s, e):
                    g = tile_gauss[k]
                    dx = cx - means[g, 0]
                    dy = cy - means[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    alpha = min(ALPHA_MAX, opacities[g] * np.exp(power))
                    if alpha < ALPHA_MIN:
                        continue
                    used[m] = k
                    alphas[m] = alpha
                    Ts[m] = T
                    m += 1
                    T = T * (1.0 - alpha)
                    if T < T_MIN:
                        break
                if m == 0:
                    continue
                dc0 = d_color[py, px, 0]
                dc1 = d_color[py, px, 1]
                dc2 = d_color[py, px, 2]
                dd = d_depth[py, px]
                # contribution of everything behind entry i, incl. background and final T
                behind = T * (bg[0] * dc0 + bg[1] * dc1 + bg[2] * dc2 + d_T[py, px])
                for i in range(m - 1, -1, -1):
                    k = used[i]
                    g = tile_gauss[k]
                    alpha = alphas[i]
                    w = alpha * Ts[i]
                    g_color[k, 0] += w * dc0
                    g_color[k, 1] += w * dc1
                    g_color[k, 2] += w * dc2
                    g_depth[k] += w * dd
                    val = colors[g, 0] * dc0 + colors[g, 1] * dc1 + colors[g, 2] * dc2 + depths[g] * dd
                    for f in range(nf):
                        df = d_feat[py, px, f]
                        g_feat[k, f] += w * df
                        val += feats[g, f] * df
                    d_alpha = Ts[i] * val - behind / (1.0 - alpha)
                    behind += w * val
                    dx = cx - means[g, 0]
                    dy = cy - means[g, 1]
                    G = np.exp(-0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy)
                    if opacities[g] * G > ALPHA_MAX:
                        continue
                    g_opacity[k] += G * d_alpha
                    d_power = alpha * d_alpha
                    # power = -0.5 a dx^2 - b dx dy - 0.5 c dy^2, dx = px - mean_x
                    g_mean[k, 0] += d_power * (conics[g, 0] * dx + conics[g, 1] * dy)
                    g_mean[k, 1] += d_power * (conics[g, 1] * dx + conics[g, 2] * dy)
                    g_conic[k, 0] += -0.5 * dx * dx * d_power
                    g_conic[k, 1] += -dx * dy * d_power
                    g_conic[k, 2] += -0.5 * dy * dy * d_power


@nb.njit(cache=True)
def oracle_blend(means, conics, opacities, colors, feats, depths, bg, order, width, height,
                 out_color, out_feat, out_depth, out_T, out_wsum):
    """Reference blend: every pixel against every Gaussian, float64 throughout."""
    nf = feats.shape[1]
    for py in range(height):
        for px in range(width):
            cx = px + 0.5
            cy = py + 0.5
            T = 1.0
            wsum = 0.0
            for j in range(order.shape[0]):
                g = order[j]
                dx = cx - means[g, 0]
                dy = cy - means[g, 1]
                q = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                alpha = opacities[g] * np.exp(-0.5 * q)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    continue
                w = alpha * T
                for ch in range(3):
                    out_color[py, px, ch] += w * colors[g, ch]
                for f in range(nf):
                    out_feat[py, px, f] += w * feats[g, f]
                out_depth[py, px] += w * depths[g]
                wsum += w
                T = T * (1.0 - alpha)
                if T < T_MIN:
                    break
            for ch in range(3):
                out_color[py, px, ch] += T * bg[ch]
            out_T[py, px] = T
            out_wsum[py, px] = wsum
