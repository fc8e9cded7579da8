"""Scene representation: factorized feature grids, material heads, normals.

The spatial fields use a low-rank vector-matrix factorization: a feature
volume is the sum, over three axis pairings and ``rank`` components, of an
interpolated plane factor times an interpolated line factor.  Density is
one single-channel grid; each material property (albedo, roughness, f0)
owns its own small multi-channel grid and decoder MLP, so gradients from a
loss on one property can never reach another property's parameters.

Surface normals are the negative normalized spatial gradient of the
density, computed analytically through the interpolation (the softplus
activation only rescales the gradient by a positive factor, which the
normalization removes; the degeneracy test still applies it).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_node
from .config import Config
from .optim import Param, ParamGroup, check_unique_groups
from .rng import stream
from .shading import EnvironmentMap

# plane axes / line axis per factorization mode
_MODES = ((0, 1, 2), (0, 2, 1), (1, 2, 0))


class VMGrid:
    """Vector-matrix factorized feature volume over an axis-aligned box.

    planes[m] has shape (rank, channels, res[a0], res[a1]) and lines[m]
    has shape (rank, channels, res[c]) for mode m with plane axes (a0, a1)
    and line axis c.  Queries outside the box return zero features.
    """

    def __init__(self, resolution, rank: int, channels: int,
                 aabb: tuple[float, float], planes=None, lines=None):
        self.resolution = tuple(int(r) for r in resolution)
        if any(r < 2 for r in self.resolution):
            raise ValueError("grid needs at least 2 nodes per axis")
        self.rank = int(rank)
        self.channels = int(channels)
        self.aabb = (float(aabb[0]), float(aabb[1]))
        if planes is None:
            planes = [
                Tensor(np.zeros((rank, channels,
                                 self.resolution[a0], self.resolution[a1]),
                                dtype=np.float32), requires_grad=True)
                for a0, a1, _ in _MODES
            ]
        if lines is None:
            lines = [
                Tensor(np.zeros((rank, channels, self.resolution[c]),
                                dtype=np.float32), requires_grad=True)
                for _, _, c in _MODES
            ]
        self.planes = list(planes)
        self.lines = list(lines)

    def tensors(self) -> list[Tensor]:
        return self.planes + self.lines

    def randomize(self, rng: np.random.Generator, scale: float = 0.1) -> None:
        for t in self.tensors():
            t.data = (scale * rng.standard_normal(t.data.shape)).astype(np.float32)

    def clone(self) -> "VMGrid":
        g = VMGrid(self.resolution, self.rank, self.channels, self.aabb,
                   planes=[_clone_tensor(t) for t in self.planes],
                   lines=[_clone_tensor(t) for t in self.lines])
        return g


def _clone_tensor(t: Tensor) -> Tensor:
    out = Tensor(t.data.copy(), requires_grad=t.requires_grad,
                 dtype=t.data.dtype)
    return out


def _axis_coords(grid: VMGrid, pts: np.ndarray):
    """Cell index, fractional offset and index scale per axis.

    Cells are chosen as clip(ceil(u) - 1, 0, res - 2): a point exactly on a
    node belongs to the lower cell, which fixes the spatial-gradient value
    on cell boundaries.
    """
    lo, hi = grid.aabb
    cells, fracs, scales = [], [], []
    for k in range(3):
        res = grid.resolution[k]
        s = (res - 1) / (hi - lo)
        u = (pts[:, k] - lo) * s
        cell = np.clip(np.ceil(u) - 1.0, 0, res - 2).astype(np.int64)
        fracs.append(u - cell)
        cells.append(cell)
        scales.append(s)
    return cells, fracs, scales


def _inside_mask(grid: VMGrid, pts: np.ndarray) -> np.ndarray:
    lo, hi = grid.aabb
    return np.all((pts >= lo) & (pts <= hi), axis=1)


def vm_query(grid: VMGrid, pts: np.ndarray) -> Tensor:
    """Interpolated feature vector at each point; (N, channels).

    Fused primitive: the forward pass gathers the four plane corners and
    two line ends per mode, and the backward pass scatter-adds the matching
    cograds into the factor tensors.
    """
    pts = np.asarray(pts)
    n = pts.shape[0]
    R, C = grid.rank, grid.channels
    rc = R * C
    dtype = np.result_type(pts.dtype, grid.planes[0].data.dtype)
    inside = _inside_mask(grid, pts).astype(dtype)
    cells, fracs, _ = _axis_coords(grid, np.clip(pts, *grid.aabb))

    out = np.zeros((n, C), dtype=dtype)
    parents = []
    for m, (a0, a1, c) in enumerate(_MODES):
        plane, line = grid.planes[m], grid.lines[m]
        A, B = plane.data.shape[2], plane.data.shape[3]
        D = line.data.shape[2]
        f0, f1, fc = fracs[a0], fracs[a1], fracs[c]
        # bake the outside-box mask into the plane weights so both the
        # value and every gradient vanish outside
        w = (
            (1.0 - f0) * (1.0 - f1) * inside,
            (1.0 - f0) * f1 * inside,
            f0 * (1.0 - f1) * inside,
            f0 * f1 * inside,
        )
        offsets = (0, 1, B, B + 1)
        idx_p = cells[a0] * B + cells[a1]
        plane_flat = plane.data.reshape(rc, A * B)
        corners = [plane_flat.take(idx_p + off, axis=1) for off in offsets]
        pl = w[0] * corners[0] + w[1] * corners[1] \
            + w[2] * corners[2] + w[3] * corners[3]

        line_flat = line.data.reshape(rc, D)
        idx_c = cells[c]
        l0 = line_flat.take(idx_c, axis=1)
        l1 = line_flat.take(idx_c + 1, axis=1)
        li = (1.0 - fc) * l0 + fc * l1

        out += (pl * li).reshape(R, C, n).sum(axis=0).T

        def plane_vjp(g, li=li, w=w, idx_p=idx_p, offsets=offsets,
                      A=A, B=B):
            # (R, C, N) product via broadcasting; no materialized repeat
            dpl = (li.reshape(R, C, n) * g.T[None]).reshape(rc, n)
            base = (np.arange(rc, dtype=np.int64) * (A * B))[:, None] + idx_p
            acc = np.zeros(rc * A * B)
            for off, wk in zip(offsets, w):
                acc += np.bincount((base + off).ravel(),
                                   weights=(dpl * wk).ravel(),
                                   minlength=rc * A * B)
            return acc.reshape(R, C, A, B).astype(g.dtype)

        def line_vjp(g, pl=pl, fc=fc, inside=inside, idx_c=idx_c, D=D):
            dli = (pl.reshape(R, C, n) * g.T[None]).reshape(rc, n) * inside
            base = (np.arange(rc, dtype=np.int64) * D)[:, None] + idx_c
            acc = np.bincount(base.ravel(), weights=(dli * (1.0 - fc)).ravel(),
                              minlength=rc * D)
            acc += np.bincount((base + 1).ravel(), weights=(dli * fc).ravel(),
                               minlength=rc * D)
            return acc.reshape(R, C, D).astype(g.dtype)

        parents.append((plane, plane_vjp))
        parents.append((line, line_vjp))

    return make_node(out, parents)


def vm_spatial_grad(grid: VMGrid, pts: np.ndarray) -> Tensor:
    """Spatial gradient of a single-channel grid's raw field; (N, 3).

    Piecewise-multilinear interpolation has a well-defined gradient inside
    each cell; boundary points use the lower-index cell (see _axis_coords).
    Differentiable with respect to the factor tensors.
    """
    if grid.channels != 1:
        raise ValueError("spatial gradient is defined for 1-channel grids")
    pts = np.asarray(pts)
    n = pts.shape[0]
    R = grid.rank
    dtype = np.result_type(pts.dtype, grid.planes[0].data.dtype)
    inside = _inside_mask(grid, pts).astype(dtype)
    cells, fracs, scales = _axis_coords(grid, np.clip(pts, *grid.aabb))

    out = np.zeros((n, 3), dtype=dtype)
    parents = []
    for m, (a0, a1, c) in enumerate(_MODES):
        plane, line = grid.planes[m], grid.lines[m]
        A, B = plane.data.shape[2], plane.data.shape[3]
        D = line.data.shape[2]
        f0, f1, fc = fracs[a0], fracs[a1], fracs[c]
        s0, s1, sc = scales[a0], scales[a1], scales[c]
        offsets = (0, 1, B, B + 1)
        idx_p = cells[a0] * B + cells[a1]
        plane_flat = plane.data.reshape(R, A * B)
        g00 = plane_flat.take(idx_p, axis=1)
        g01 = plane_flat.take(idx_p + 1, axis=1)
        g10 = plane_flat.take(idx_p + B, axis=1)
        g11 = plane_flat.take(idx_p + B + 1, axis=1)

        line_flat = line.data.reshape(R, D)
        idx_c = cells[c]
        l0 = line_flat.take(idx_c, axis=1)
        l1 = line_flat.take(idx_c + 1, axis=1)
        li = (1.0 - fc) * l0 + fc * l1
        dli = l1 - l0

        w = ((1.0 - f0) * (1.0 - f1), (1.0 - f0) * f1,
             f0 * (1.0 - f1), f0 * f1)
        pl = w[0] * g00 + w[1] * g01 + w[2] * g10 + w[3] * g11
        dpl0 = (g10 - g00) * (1.0 - f1) + (g11 - g01) * f1
        dpl1 = (g01 - g00) * (1.0 - f0) + (g11 - g10) * f0

        out[:, a0] += s0 * inside * (dpl0 * li).sum(axis=0)
        out[:, a1] += s1 * inside * (dpl1 * li).sum(axis=0)
        out[:, c] += sc * inside * (pl * dli).sum(axis=0)

        def plane_vjp(g, li=li, dli=dli, w=w, f0=f0, f1=f1,
                      idx_p=idx_p, inside=inside,
                      a0=a0, a1=a1, c=c, s0=s0, s1=s1, sc=sc, A=A, B=B):
            h0 = g[:, a0] * s0 * inside
            h1 = g[:, a1] * s1 * inside
            hc = g[:, c] * sc * inside
            base = (np.arange(R, dtype=np.int64) * (A * B))[:, None] + idx_p
            acc = np.zeros(R * A * B)
            corner_terms = (
                (0, h0 * -(1.0 - f1) + h1 * -(1.0 - f0), w[0]),
                (1, h0 * -f1 + h1 * (1.0 - f0), w[1]),
                (B, h0 * (1.0 - f1) + h1 * -f0, w[2]),
                (B + 1, h0 * f1 + h1 * f0, w[3]),
            )
            for off, plane_part, wk in corner_terms:
                vals = li * plane_part + (hc * wk) * dli
                acc += np.bincount((base + off).ravel(), weights=vals.ravel(),
                                   minlength=R * A * B)
            return acc.reshape(R, 1, A, B).astype(g.dtype)

        def line_vjp(g, pl=pl, dpl0=dpl0, dpl1=dpl1, fc=fc, idx_c=idx_c,
                     inside=inside, a0=a0, a1=a1, c=c,
                     s0=s0, s1=s1, sc=sc, D=D):
            h0 = g[:, a0] * s0 * inside
            h1 = g[:, a1] * s1 * inside
            hc = g[:, c] * sc * inside
            plane_part = dpl0 * h0 + dpl1 * h1
            base = (np.arange(R, dtype=np.int64) * D)[:, None] + idx_c
            acc = np.bincount(base.ravel(),
                              weights=(plane_part * (1.0 - fc)
                                       - hc * pl).ravel(),
                              minlength=R * D)
            acc += np.bincount((base + 1).ravel(),
                               weights=(plane_part * fc + hc * pl).ravel(),
                               minlength=R * D)
            return acc.reshape(R, 1, D).astype(g.dtype)

        parents.append((plane, plane_vjp))
        parents.append((line, line_vjp))

    return make_node(out, parents)


def dense_reconstruction(grid: VMGrid) -> np.ndarray:
    """Materialize the full (C, Rx, Ry, Rz) volume the factors describe.

    Only reasonable for tiny grids; used as the independent reference that
    vm_query is checked against.
    """
    rx, ry, rz = grid.resolution
    vol = np.zeros((grid.channels, rx, ry, rz), dtype=np.float64)
    shapes = {0: rx, 1: ry, 2: rz}
    for m, (a0, a1, c) in enumerate(_MODES):
        p = grid.planes[m].data.astype(np.float64)
        l = grid.lines[m].data.astype(np.float64)
        # outer product (A, B) x (D,) laid out on the right axes
        full = np.einsum("rcab,rcd->cabd", p, l)
        order = [a0, a1, c]
        perm = [1 + order.index(k) for k in range(3)]
        vol += full.transpose([0] + perm)
    del shapes
    return vol


def positional_encoding(x, num_frequencies: int, include_input: bool = True):
    """NeRF-style sin/cos feature expansion.

    Accepts either a constant ndarray (returns ndarray) or a graph Tensor
    (returns Tensor); inputs are expected in roughly [-1, 1].
    """
    if isinstance(x, Tensor) and x.tracked:
        parts = [x] if include_input else []
        for k in range(num_frequencies):
            s = float((2.0 ** k) * np.pi)
            parts.append(ad.sin(x * s))
            parts.append(ad.cos(x * s))
        return ad.concat(parts, axis=-1)
    xv = x.data if isinstance(x, Tensor) else np.asarray(x)
    parts = [xv] if include_input else []
    for k in range(num_frequencies):
        s = (2.0 ** k) * np.pi
        parts.append(np.sin(s * xv))
        parts.append(np.cos(s * xv))
    return np.concatenate(parts, axis=-1)


def encoding_width(num_frequencies: int, include_input: bool,
                   dims: int = 3) -> int:
    return dims * (1 if include_input else 0) + dims * 2 * num_frequencies


class MLP:
    """Fully connected stack, ReLU hidden activations, linear output."""

    def __init__(self, sizes: list[int], rng: np.random.Generator | None = None,
                 out_bias: float = 0.0):
        self.sizes = list(sizes)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        rng = rng or np.random.default_rng(0)
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            last = i == len(sizes) - 2
            scale = 0.01 if last else np.sqrt(2.0 / fan_in)
            w = (scale * rng.standard_normal((fan_in, fan_out))).astype(np.float32)
            b = np.full(fan_out, out_bias if last else 0.0, dtype=np.float32)
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(b, requires_grad=True))

    def __call__(self, x):
        h = x
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if i < n_layers - 1:
                h = ad.relu(h)
        return h

    def params(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"w{i}", w))
            out.append((f"b{i}", b))
        return out

    def zero(self) -> None:
        for t in self.weights + self.biases:
            t.data = np.zeros_like(t.data)

    def clone(self) -> "MLP":
        m = MLP.__new__(MLP)
        m.sizes = list(self.sizes)
        m.weights = [_clone_tensor(t) for t in self.weights]
        m.biases = [_clone_tensor(t) for t in self.biases]
        return m


MATERIAL_HEADS = ("albedo", "roughness", "f0")
_HEAD_CHANNELS = {"albedo": 3, "roughness": 1, "f0": 3}


class SceneModel:
    """Density grid + three disentangled material branches + illumination.

    Exposes exactly six parameter groups: density, albedo, roughness, f0,
    envmap, specular_mlp.  The ``multipliers`` dict is the hook used by the
    perturbation module; values are applied to the matching material head
    after its sigmoid and clipped back into [0, 1].
    """

    def __init__(self, config: Config, density_grid: VMGrid,
                 density_shift: Tensor, app_grids: dict[str, VMGrid],
                 decoders: dict[str, MLP], g_mlp: MLP,
                 envmap: EnvironmentMap):
        self.config = config
        self.density_grid = density_grid
        self.density_shift = density_shift
        self.app_grids = app_grids
        self.decoders = decoders
        self.g_mlp = g_mlp
        self.envmap = envmap
        self.multipliers: dict[str, float] = {}
        self.applied_perturbations: list[str] = []
        self.groups = self._build_groups()
        check_unique_groups(self.groups)

    def _build_groups(self) -> list[ParamGroup]:
        cfg = self.config
        groups = []
        density_params = [
            Param(f"grid{i}", t, cfg.lr_grid)
            for i, t in enumerate(self.density_grid.tensors())
        ]
        density_params.append(Param("shift", self.density_shift, cfg.lr_mlp))
        groups.append(ParamGroup("density", density_params))
        for head in MATERIAL_HEADS:
            params = [
                Param(f"grid{i}", t, cfg.lr_grid)
                for i, t in enumerate(self.app_grids[head].tensors())
            ]
            params += [Param(f"mlp_{n}", t, cfg.lr_mlp)
                       for n, t in self.decoders[head].params()]
            groups.append(ParamGroup(head, params))
        groups.append(ParamGroup("envmap", [
            Param("raw", self.envmap.raw, cfg.lr_envmap)]))
        groups.append(ParamGroup("specular_mlp", [
            Param(f"mlp_{n}", t, cfg.lr_mlp)
            for n, t in self.g_mlp.params()]))
        return groups

    def group(self, name: str) -> ParamGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(f"unknown parameter group: {name}")

    def zero_grad(self) -> None:
        for g in self.groups:
            g.zero_grad()

    # -- field queries -------------------------------------------------
    def _normalized(self, pts: np.ndarray) -> np.ndarray:
        lo, hi = self.config.aabb
        return 2.0 * (pts - lo) / (hi - lo) - 1.0

    def density_raw(self, pts: np.ndarray) -> Tensor:
        raw = vm_query(self.density_grid, pts)
        return ad.add(ad.reshape(raw, (-1,)), self.density_shift)

    def density(self, pts: np.ndarray) -> Tensor:
        """Nonnegative volume density via shifted softplus."""
        return ad.softplus(self.density_raw(pts))

    def normal(self, pts: np.ndarray, raw: Tensor | None = None):
        """Unit surface normal, its validity mask and |grad sigma|.

        The normal is the negative normalized spatial gradient of the
        density.  Softplus rescales the gradient by sigmoid(raw + shift);
        normalization cancels that factor exactly (value and gradient), so
        it only enters the degeneracy magnitude test.
        """
        sg = vm_spatial_grad(self.density_grid, pts)
        if raw is None:
            raw = self.density_raw(pts)
        act = 1.0 / (1.0 + np.exp(-raw.data))
        norm = np.linalg.norm(sg.data, axis=1)
        valid = (act * norm) > self.config.normal_eps
        inv = ad.power(ad.tsum(ad.mul(sg, sg), axis=1, keepdims=True) + 1e-24,
                       -0.5)
        n_hat = ad.neg(ad.mul(sg, inv))
        return n_hat, valid, act * norm

    def material(self, pts: np.ndarray) -> dict[str, Tensor]:
        """Sigmoid material heads, each fed only by its own grid, plus PE."""
        pe = positional_encoding(self._normalized(pts), self.config.pe_freqs,
                                 self.config.pe_include_input)
        out = {}
        for head in MATERIAL_HEADS:
            feat = vm_query(self.app_grids[head], pts)
            x = ad.concat([feat, pe], axis=-1)
            val = ad.sigmoid(self.decoders[head](x))
            m = self.multipliers.get(head)
            if m is not None:
                val = ad.clamp(ad.mul(val, float(m)), 0.0, 1.0)
            out[head] = val
        return out

    def implicit_specular(self, dots) -> Tensor:
        """Bounded multiplier g in (0, 2) from direction-geometry scalars."""
        enc = positional_encoding(dots, self.config.g_pe_freqs, True)
        return ad.mul(ad.sigmoid(self.g_mlp(enc)), 2.0)

    def clone(self) -> "SceneModel":
        model = SceneModel(
            self.config,
            self.density_grid.clone(),
            _clone_tensor(self.density_shift),
            {h: g.clone() for h, g in self.app_grids.items()},
            {h: d.clone() for h, d in self.decoders.items()},
            self.g_mlp.clone(),
            self.envmap.clone(),
        )
        model.multipliers = dict(self.multipliers)
        model.applied_perturbations = list(self.applied_perturbations)
        for g_src, g_dst in zip(self.groups, model.groups):
            g_dst.set_trainable(g_src.trainable)
        return model


def build_model(config: Config, seed: int | None = None) -> SceneModel:
    """Fresh model with the near-empty density initialization."""
    config.validate()
    seed = config.seed if seed is None else seed
    rng = stream(seed, "init")
    density = VMGrid(config.density_res, config.density_rank, 1, config.aabb)
    density.randomize(rng)
    shift = Tensor(np.float32(config.density_shift_init), requires_grad=True)

    pe_width = encoding_width(config.pe_freqs, config.pe_include_input)
    app_grids, decoders = {}, {}
    head_bias = {"albedo": 0.0, "roughness": 0.0, "f0": config.f0_bias}
    for head in MATERIAL_HEADS:
        grid = VMGrid(config.app_res, config.app_rank, config.app_channels,
                      config.aabb)
        grid.randomize(rng)
        app_grids[head] = grid
        decoders[head] = MLP(
            [config.app_channels + pe_width, config.hidden_width,
             config.hidden_width, _HEAD_CHANNELS[head]],
            rng=rng, out_bias=head_bias[head])

    g_mlp = MLP([encoding_width(config.g_pe_freqs, True),
                 config.g_hidden_width, config.g_hidden_width, 1], rng=rng)
    envmap = EnvironmentMap.gray(config.env_height, config.env_width,
                                 value=0.5, rng=rng)
    return SceneModel(config, density, shift, app_grids, decoders, g_mlp,
                      envmap)
