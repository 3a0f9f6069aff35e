"""Operation-count models for DiT, DiffuSSM and DiM, a shape-only walker over
a concrete DiM, and the resolution-ladder report.

The analytic formulas are per block; totals multiply by the layer count.
A multiply-add counts as two operations everywhere.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

from .model import SIZES, DimModel, ModelConfig, param_shapes
from .patchify import PatchGrid

ARCHES = ("dit", "diffussm", "dim")
ARCH_LABELS = {"dit": "DiT", "diffussm": "DiffuSSM", "dim": "DiM"}
VAE_FACTOR = 8       # pixel -> latent downsampling of the autoencoder the ladder assumes
DIT_HEADS = 16       # attention heads of DiT-XL, used only for the memory narrative
DEFAULT_RESOLUTIONS = (256, 512, 1024, 2048)


def _check_pos(**kw):
    for k, v in kw.items():
        if int(v) != v or v < 1:
            raise ValueError(f"{k} must be a positive integer, got {v!r}")


def flops_dit(L: int, D: int) -> int:
    """Per-block attention transformer count ``4 L D^2 + 2 L^2 D``."""
    _check_pos(L=L, D=D)
    return 4 * L * D * D + 2 * L * L * D


def flops_diffussm(L: int, D: int) -> int:
    """Per-block ``7.5 L D^2`` rounded half-up (exact integer arithmetic)."""
    _check_pos(L=L, D=D)
    return (15 * L * D * D + 1) // 2


def flops_dim(L: int, D: int, N: int = 16) -> int:
    """Per-block bidirectional-scan count ``3L(2D)N + L(2D)N = 8 N L D``."""
    _check_pos(L=L, D=D, N=N)
    return 8 * N * L * D


@dataclass(frozen=True)
class CostModel:
    arch: str
    L: int
    D: int
    layers: int
    N: Optional[int]
    terms: Tuple[Tuple[str, int], ...]
    total: int
    fixed: FrozenSet[str] = field(default_factory=frozenset)  # terms that do not grow with L

    def __post_init__(self):
        if self.total != sum(c for _, c in self.terms):
            raise ValueError("total must equal the sum of the terms")

    def term(self, name: str) -> int:
        return sum(c for d, c in self.terms if d == name)

    @property
    def fixed_total(self) -> int:
        return sum(c for d, c in self.terms if d in self.fixed)

    @property
    def scaling_total(self) -> int:
        return self.total - self.fixed_total


def _cost(arch, L, D, layers, N, terms, fixed=()):
    terms = tuple((d, int(c)) for d, c in terms)
    return CostModel(arch, L, D, layers, N, terms, sum(c for _, c in terms), frozenset(fixed))


def analytic_cost(arch: str, L: int, D: int, layers: int, N: int = 16) -> CostModel:
    """Per-block formula of ``arch`` times ``layers``."""
    _check_pos(layers=layers)
    if arch == "dit":
        return _cost(arch, L, D, layers, None, [
            ("projections 4LD^2 x layers", 4 * L * D * D * layers),
            ("attention 2L^2D x layers", 2 * L * L * D * layers)])
    if arch == "diffussm":
        return _cost(arch, L, D, layers, None, [("7.5LD^2 x layers", flops_diffussm(L, D) * layers)])
    if arch == "dim":
        return _cost(arch, L, D, layers, N, [("8NLD x layers", flops_dim(L, D, N) * layers)])
    raise ValueError(f"unknown architecture {arch!r}; valid: {list(ARCHES)}")


# -- concrete walker ---------------------------------------------------------

SCAN_TERM = "selective scan, one direction (8NLD x layers)"
SCAN_BIDIR_TERM = "selective scan, second direction"


def count_model_ops(model: Union[DimModel, ModelConfig], grid: Optional[PatchGrid] = None) -> CostModel:
    """Count the multiply-adds (2 ops each) of one forward pass for one sample.

    Walks the patch embedder, conditioning MLP, every block's linear layers,
    depthwise convolutions and both scan directions, and the output head.
    Elementwise work (norms, activations, gating) is not counted. Only
    parameter shapes are read, so the counts do not depend on values.

    A scan direction costs ``3 Di N`` per token for discretize-and-update
    plus ``Di N`` for the readout, i.e. ``8 N L D`` with ``Di = 2D``.
    """
    cfg = model.cfg if isinstance(model, DimModel) else model
    grid = grid or cfg.grid
    shapes = param_shapes(cfg)
    D, n_layers = cfg.hidden_d, cfg.layers
    Di, N, R, K = cfg.d_inner, cfg.ssm_state_n, cfg.dt_rank, cfg.conv_width
    Lp = grid.l_total
    Ls = Lp + int(cfg.class_token)
    tok = grid.token_dim
    f = cfg.freq_dim

    def mac(*dims):
        out = 2
        for d in dims:
            out *= d
        return out

    assert shapes["x_embed.w"] == (tok, D)
    per_block = {
        "block in_proj": mac(Ls, D, 2 * Di),
        "block causal conv (2 directions)": 2 * mac(Ls, Di, K),
        "block x_proj (2 directions)": 2 * mac(Ls, Di, R + 2 * N),
        "block dt_proj (2 directions)": 2 * mac(Ls, R, Di),
        "block out_proj": mac(Ls, 2 * Di, D),
    }
    terms = [
        ("patch embedder", mac(Lp, tok, D)),
        ("timestep MLP", mac(f, D) + mac(D, D)),
    ]
    fixed = {"timestep MLP"}
    if cfg.adaln:
        terms.append(("block adaLN modulation", mac(D, 3 * D) * n_layers))
        fixed.add("block adaLN modulation")
    terms += [(k, v * n_layers) for k, v in per_block.items()]
    terms += [
        (SCAN_TERM, 4 * Ls * Di * N * n_layers),
        (SCAN_BIDIR_TERM, 4 * Ls * Di * N * n_layers),
        ("final modulation", mac(D, 2 * D)),
        ("output head", mac(Lp, D, tok)),
    ]
    fixed.add("final modulation")
    return _cost("dim-walker", Ls, D, n_layers, N, terms, fixed)


# -- report ------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    label: str
    arch: str
    counts: Tuple[int, ...]
    note: str


@dataclass(frozen=True)
class GflopsReport:
    resolutions: Tuple[int, ...]
    rows: Tuple[ReportRow, ...]
    markdown: str
    csv: str


def _parse_config(c) -> Tuple[str, str, int]:
    if isinstance(c, dict):
        return c["arch"], c.get("size", "XL"), int(c.get("patch", 2))
    arch, size, patch = c
    return arch, size, int(patch)


def tokens_at(resolution: int, patch: int, vae_factor: int = VAE_FACTOR) -> int:
    if resolution % (vae_factor * patch):
        raise ValueError(f"resolution {resolution} is not divisible by {vae_factor * patch}")
    side = resolution // vae_factor // patch
    return side * side


def _fmt_gflops(count: int) -> str:
    return f"{count / 1e9:.2f}"


def _note(arch: str, L: int, D: int) -> str:
    if arch == "dit":
        gib = L * L * DIT_HEADS * 4 / 2 ** 30
        return f"L^2 attention: {gib:.2f} GiB of fp32 maps per layer at L={L} (OOM-prone)"
    if arch == "diffussm":
        return "no L^2 term; quadratic in D"
    return f"no L^2 term; linear in L and D (fits at L={L})"


def gflops_report(configs: Sequence, resolutions: Iterable[int], walker: bool = False) -> GflopsReport:
    """Analytic Gflops per (architecture, resolution).

    ``configs`` holds ``(arch, size, patch)`` tuples or dicts with those keys.
    Resolutions are in pixels and map to ``(res / 8 / patch)^2`` tokens.
    With ``walker`` a concrete DiM row from :func:`count_model_ops` follows
    each DiM config. The markdown carries a narrative column about the
    largest resolution; the CSV has one column per resolution plus the label.
    """
    res = tuple(int(r) for r in resolutions)
    if not res:
        raise ValueError("at least one resolution is required")
    for r in res:
        _check_pos(resolution=r)
    rows: List[ReportRow] = []
    for c in configs:
        arch, size, patch = _parse_config(c)
        if arch not in ARCHES:
            raise ValueError(f"unknown architecture {arch!r}; valid: {list(ARCHES)}")
        if size not in SIZES:
            raise ValueError(f"unknown size {size!r}; valid: {sorted(SIZES)}")
        layers, D = SIZES[size]
        Ls = [tokens_at(r, patch) for r in res]
        counts = tuple(analytic_cost(arch, L, D, layers).total for L in Ls)
        label = f"{ARCH_LABELS[arch]}-{size}/{patch}"
        rows.append(ReportRow(label, arch, counts, _note(arch, Ls[-1], D)))
        if walker and arch == "dim":
            wc = []
            for r in res:
                mcfg = ModelConfig.preset(size, patch=patch, in_channels=4, num_classes=1000,
                                          input_size=r // VAE_FACTOR)
                wc.append(count_model_ops(mcfg).total)
            rows.append(ReportRow(label + " (walker)", "dim-walker", tuple(wc),
                                  "all linear, conv and scan multiply-adds, both directions"))

    md = ["| model | " + " | ".join(f"{r}x{r}" for r in res) + " | ratios | note |",
          "|---" * (len(res) + 3) + "|"]
    for row in rows:
        ratios = ", ".join(f"{b / a:.3f}" for a, b in zip(row.counts, row.counts[1:])) or "-"
        md.append(f"| {row.label} | " + " | ".join(_fmt_gflops(c) for c in row.counts)
                  + f" | {ratios} | {row.note} |")
    md.append("")
    md.append("Gflops per forward pass of one sample; a multiply-add counts as 2 operations.")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["model"] + [f"{r}x{r}" for r in res])
    for row in rows:
        w.writerow([row.label] + [_fmt_gflops(c) for c in row.counts])
    return GflopsReport(res, tuple(rows), "\n".join(md) + "\n", buf.getvalue())
