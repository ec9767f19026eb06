"""Experiment loop: structures x sides x masking modes x repeated runs.

Each grid cell hides one structure, inpaints it with the conditional
sampler, composes the completion back into the original image, and scores
the result two ways: mean squared error over the structure pixels, and the
log-Jacobian of a deformable registration between original and completed
image. Bilateral mode additionally hides the mirror structure so the
sampler cannot condition on the contralateral side; the unilateral and
bilateral run distributions are then compared per cell.

Every run derives its RNG stream from (master seed, subject, structure,
side, mode, run index), so results are identical regardless of worker
count or scheduling order.
"""

from __future__ import annotations

import configparser
import csv
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import (
    AnalyticDenoiser,
    Denoiser,
    NoiseSchedule,
    make_linear_schedule,
)
from .grid import (
    BinaryMask,
    Image,
    StructureAtlas,
    mask_and,
    mask_complement,
    write_image,
)
from .phantom import generate, gmm_from_spec, parse_phantom_spec
from .registration import (
    BSplineField,
    LogJacMap,
    RegParams,
    log_jacobian,
    register,
)
from .repaint import RepaintConfig, inpaint
from .seeds import derive_rng, derive_seed, rng_from_seed

__all__ = [
    "MODES",
    "ExperimentConfigError",
    "SubjectSpec",
    "ExperimentConfig",
    "RunRecord",
    "CellAggregate",
    "ComparisonRow",
    "ExperimentResult",
    "known_mask_for",
    "masked_mse",
    "run_cell",
    "aggregate",
    "sign_test_p",
    "symmetry_comparison",
    "emit_report",
    "load_experiment_config",
    "plan_jobs",
    "run_experiment",
    "run_and_report",
    "PARTIAL_MARKER",
]

logger = logging.getLogger(__name__)

MODES = ("baseline", "bilateral")

PARTIAL_MARKER = ".partial"

# Filenames embed these, so keep them shell- and path-safe.
_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


class ExperimentConfigError(ValueError):
    """Raised for unreadable, malformed, or inconsistent experiment configs."""


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class SubjectSpec:
    """One subject: a phantom spec file plus an optional fixed latent seed.

    With seed=None the latent draw is derived from the experiment's master
    seed and the subject id, so distinct subjects sharing one phantom file
    get independent anatomy.
    """

    subject_id: str
    phantom_path: str
    seed: int | None = None

    def __post_init__(self):
        if not _NAME_RE.match(self.subject_id):
            raise ValueError(
                f"subject id {self.subject_id!r} must match {_NAME_RE.pattern}"
            )


@dataclass(frozen=True)
class ExperimentConfig:
    subjects: tuple[SubjectSpec, ...]
    structures: tuple[str, ...] | None  # None = every structure in the phantom
    sides: tuple[str, ...] = StructureAtlas.SIDES
    modes: tuple[str, ...] = MODES
    runs: int = 10
    master_seed: int = 0
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    gmm_components: int = 512
    repaint: RepaintConfig = field(default_factory=RepaintConfig)
    registration: RegParams = field(default_factory=RegParams)
    out_dir: str = "results"

    def __post_init__(self):
        if not self.subjects:
            raise ValueError("at least one subject is required")
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")
        if self.structures is not None and not self.structures:
            raise ValueError("structure list must be nonempty (or None for all)")
        if not self.sides or any(k not in StructureAtlas.SIDES for k in self.sides):
            raise ValueError(f"sides must be a nonempty subset of {StructureAtlas.SIDES}")
        if not self.modes or any(m not in MODES for m in self.modes):
            raise ValueError(f"modes must be a nonempty subset of {MODES}")
        if self.runs < 1:
            raise ValueError(f"runs must be >= 1, got {self.runs}")
        if self.timesteps < 1:
            raise ValueError(f"timesteps must be >= 1, got {self.timesteps}")
        if self.gmm_components < 1:
            raise ValueError(f"gmm_components must be >= 1, got {self.gmm_components}")


@dataclass(frozen=True)
class RunRecord:
    """One completed run of one grid cell.

    mse is taken over the structure pixels only. The log|J| summary covers
    structure pixels whose folding flag is clear; fold_count is the number
    of folded pixels inside the structure. degraded marks runs whose
    registration failed (mse is still valid, the log|J| fields are not).
    """

    subject: str
    structure: str
    side: str
    mode: str
    run: int
    seed: int
    mse: float
    intensity_mean: float
    logj_mean: float
    logj_std: float
    fold_count: int
    degraded: bool
    inpainted: Image
    logjac: LogJacMap | None

    def sort_key(self):
        return (self.subject, self.structure, self.side, self.mode, self.run)


@dataclass(frozen=True)
class CellAggregate:
    """Across-run statistics for one (subject, structure, side, mode) cell.

    Pixel maps use the population (biased) standard deviation; the scalar
    across-run spread of mse uses the sample standard deviation. log|J|
    maps exclude folded pixels per run, so a pixel's statistics may rest on
    fewer than n_runs samples; with no valid samples both maps hold 0.
    """

    subject: str
    structure: str
    side: str
    mode: str
    n_runs: int
    region: BinaryMask
    imean: Image
    istd: Image
    jmean: Image
    jstd: Image
    d_mean: float
    d_std: float

    def cell_key(self):
        return (self.subject, self.structure, self.side, self.mode)


@dataclass(frozen=True)
class ComparisonRow:
    """Bilateral-vs-baseline contrast for one (subject, structure, side)."""

    subject: str
    structure: str
    side: str
    delta_mse: float
    var_ratio_intensity: float
    logjstd_ratio: float
    sign_p: float


@dataclass(frozen=True)
class ExperimentResult:
    records: tuple[RunRecord, ...]
    aggregates: tuple[CellAggregate, ...]
    comparisons: tuple[ComparisonRow, ...]


# ---------------------------------------------------------------------------
# measures


def known_mask_for(atlas: StructureAtlas, structure: str, side: str, mode: str) -> BinaryMask:
    """Known-region mask (1 = conditioning pixel) for one cell.

    baseline hides only (structure, side); bilateral also hides the mirror
    structure, i.e. intersects the two per-side known masks.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    own = mask_complement(atlas.get(structure, side))
    if mode == "baseline":
        return own
    other = "right" if side == "left" else "left"
    return mask_and(own, mask_complement(atlas.get(structure, other)))


def masked_mse(a: Image, b: Image, region: BinaryMask) -> float:
    """Mean squared difference over the pixels where region = 1."""
    if a.shape != b.shape or region.shape != a.shape:
        raise ValueError(
            f"shape mismatch: {a.shape} vs {b.shape}, region {region.shape}"
        )
    n = region.count
    if n == 0:
        raise ValueError("region is empty")
    diff = (a.data - b.data) * region.bits
    return float((diff * diff).sum() / n)


def _logj_summary(logjac: LogJacMap, region: BinaryMask) -> tuple[float, float, int]:
    """(spatial mean, spatial population std, fold count) over the region.

    Folded pixels are excluded from mean/std but counted. An empty
    selection yields nan summaries.
    """
    inside = region.bool_array
    folded = logjac.folding.bool_array
    fold_count = int((inside & folded).sum())
    vals = logjac.values.data[inside & ~folded]
    if vals.size == 0:
        return float("nan"), float("nan"), fold_count
    return float(vals.mean()), float(vals.std()), fold_count


# ---------------------------------------------------------------------------
# single run and cell


def _single_run(
    subject: str,
    image: Image,
    atlas: StructureAtlas,
    structure: str,
    side: str,
    mode: str,
    run_index: int,
    seed: int,
    model: Denoiser,
    sched: NoiseSchedule,
    repaint_cfg: RepaintConfig,
    reg_params: RegParams,
) -> RunRecord:
    seg = atlas.get(structure, side)
    own_known = mask_complement(seg)

    if seg.count == 0:
        # Nothing to inpaint: the composition returns the input untouched
        # and there are no structure pixels to summarize.
        logjac = log_jacobian(
            BSplineField.zeros(image.shape, reg_params.spacing), image.shape
        )
        return RunRecord(
            subject=subject, structure=structure, side=side, mode=mode,
            run=run_index, seed=seed, mse=0.0, intensity_mean=float("nan"),
            logj_mean=float("nan"), logj_std=float("nan"), fold_count=0,
            degraded=False, inpainted=Image(image.data), logjac=logjac,
        )

    rng = rng_from_seed(seed)
    known = known_mask_for(atlas, structure, side, mode)
    completed = inpaint(image, known, model, sched, repaint_cfg, rng)
    # Only the target structure keeps its inpainted values; everything the
    # per-side mask marks known (the mirror structure included, under
    # bilateral masking) is restored from the original.
    i_hat = Image(np.where(own_known.bool_array, image.data, completed.data))
    mse = masked_mse(image, i_hat, seg)
    intensity_mean = float(i_hat.data[seg.bool_array].mean())

    logjac = None
    logj_mean = logj_std = float("nan")
    fold_count = 0
    degraded = False
    try:
        reg = register(image, i_hat, reg_params)
        logjac = log_jacobian(reg.field, image.shape)
        logj_mean, logj_std, fold_count = _logj_summary(logjac, seg)
    except (RuntimeError, FloatingPointError) as exc:
        degraded = True
        logger.warning(
            "registration failed for %s/%s/%s/%s run %d: %s",
            subject, structure, side, mode, run_index, exc,
        )

    return RunRecord(
        subject=subject, structure=structure, side=side, mode=mode,
        run=run_index, seed=seed, mse=mse, intensity_mean=intensity_mean,
        logj_mean=logj_mean, logj_std=logj_std, fold_count=fold_count,
        degraded=degraded, inpainted=i_hat, logjac=logjac,
    )


def run_cell(
    image: Image,
    atlas: StructureAtlas,
    structure: str,
    side: str,
    mode: str,
    n_runs: int,
    model: Denoiser,
    sched: NoiseSchedule,
    repaint_cfg: RepaintConfig,
    reg_params: RegParams,
    rng: np.random.Generator,
    *,
    subject: str = "subject",
) -> list[RunRecord]:
    """Execute n_runs independent runs of one cell.

    Per-run seeds are drawn from rng up front, so a generator seeded the
    same way reproduces the exact record list.
    """
    if n_runs < 1:
        raise ValueError(f"n_runs must be >= 1, got {n_runs}")
    seeds = [int(rng.integers(0, 2**63)) for _ in range(n_runs)]
    return [
        _single_run(
            subject, image, atlas, structure, side, mode, i, seeds[i],
            model, sched, repaint_cfg, reg_params,
        )
        for i in range(n_runs)
    ]


# ---------------------------------------------------------------------------
# aggregation and comparison


def aggregate(records, region: BinaryMask) -> CellAggregate:
    """Across-run statistics for the records of one cell."""
    records = list(records)
    if not records:
        raise ValueError("aggregate needs at least one record")
    keys = {r.sort_key()[:4] for r in records}
    if len(keys) != 1:
        raise ValueError(f"records span multiple cells: {sorted(keys)}")
    first = records[0]
    if region.shape != first.inpainted.shape:
        raise ValueError(
            f"region shape {region.shape} != image shape {first.inpainted.shape}"
        )

    stack = np.stack([r.inpainted.data for r in records])
    imean = stack.mean(axis=0)
    istd = stack.std(axis=0)  # population

    shape = first.inpainted.shape
    vsum = np.zeros(shape)
    v2sum = np.zeros(shape)
    count = np.zeros(shape)
    for r in records:
        if r.logjac is None:
            continue
        valid = ~r.logjac.folding.bool_array
        v = r.logjac.values.data
        vsum += np.where(valid, v, 0.0)
        v2sum += np.where(valid, v * v, 0.0)
        count += valid
    denom = np.maximum(count, 1.0)
    jmean = np.where(count > 0, vsum / denom, 0.0)
    jvar = np.where(count > 0, v2sum / denom - jmean * jmean, 0.0)
    jstd = np.sqrt(np.clip(jvar, 0.0, None))

    ds = np.array([r.mse for r in records])
    d_std = float(ds.std(ddof=1)) if len(records) > 1 else 0.0

    return CellAggregate(
        subject=first.subject, structure=first.structure, side=first.side,
        mode=first.mode, n_runs=len(records), region=region,
        imean=Image(imean), istd=Image(istd),
        jmean=Image(jmean), jstd=Image(jstd),
        d_mean=float(ds.mean()), d_std=d_std,
    )


def sign_test_p(diffs) -> float:
    """One-sided exact sign test: P(#positives >= observed) under fair coin.

    Zero differences are discarded; with no nonzero pairs the test is
    uninformative and p = 1.
    """
    nonzero = [d for d in diffs if d != 0.0]
    m = len(nonzero)
    if m == 0:
        return 1.0
    npos = sum(1 for d in nonzero if d > 0.0)
    return sum(math.comb(m, k) for k in range(npos, m + 1)) / 2**m


def _var_or_zero(values) -> float:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.var(ddof=1)) if arr.size > 1 else 0.0


def _ratio(num: float, den: float) -> float:
    if num == den:
        return 1.0
    if den == 0.0:
        return float("inf")
    return num / den


def symmetry_comparison(records, aggregates) -> list[ComparisonRow]:
    """Bilateral-vs-baseline contrast per (subject, structure, side).

    Needs both modes in a cell pair; cells with a missing mode are skipped
    with a logged notice. Runs are paired by run index for the sign test.
    """
    by_cell: dict[tuple, list[RunRecord]] = {}
    for r in records:
        by_cell.setdefault(r.sort_key()[:4], []).append(r)
    agg_by_cell = {a.cell_key(): a for a in aggregates}

    rows = []
    triples = sorted({k[:3] for k in by_cell})
    for subject, structure, side in triples:
        base_key = (subject, structure, side, "baseline")
        bil_key = (subject, structure, side, "bilateral")
        if base_key not in by_cell or bil_key not in by_cell:
            logger.warning(
                "skipping %s/%s/%s: need both modes for comparison",
                subject, structure, side,
            )
            continue
        base = sorted(by_cell[base_key], key=lambda r: r.run)
        bil = sorted(by_cell[bil_key], key=lambda r: r.run)

        delta_mse = float(np.mean([r.mse for r in bil]) - np.mean([r.mse for r in base]))
        var_ratio = _ratio(
            _var_or_zero([r.intensity_mean for r in bil]),
            _var_or_zero([r.intensity_mean for r in base]),
        )

        logjstd_ratio = float("nan")
        if base_key in agg_by_cell and bil_key in agg_by_cell:
            region = agg_by_cell[base_key].region.bool_array
            if region.any():
                logjstd_ratio = _ratio(
                    float(agg_by_cell[bil_key].jstd.data[region].mean()),
                    float(agg_by_cell[base_key].jstd.data[region].mean()),
                )

        base_by_run = {r.run: r.mse for r in base}
        diffs = [r.mse - base_by_run[r.run] for r in bil if r.run in base_by_run]
        rows.append(ComparisonRow(
            subject=subject, structure=structure, side=side,
            delta_mse=delta_mse, var_ratio_intensity=var_ratio,
            logjstd_ratio=logjstd_ratio, sign_p=sign_test_p(diffs),
        ))
    return rows


# ---------------------------------------------------------------------------
# report emission

_RUNS_NOTE = (
    "# mse: mean squared error over structure pixels; logj_mean/logj_std:"
    " spatial mean/population std of log|J| over non-folded structure pixels;"
    " seed: per-run stream seed"
)
_RUNS_COLUMNS = [
    "subject", "structure", "side", "mode", "run",
    "mse", "logj_mean", "logj_std", "fold_count", "seed",
]
_COMPARISON_NOTE = (
    "# delta_mse: mean mse bilateral minus baseline; var_ratio_intensity:"
    " sample-variance ratio of across-run structure mean intensity;"
    " logjstd_ratio: ratio of mean pixelwise population std of log|J|;"
    " sign_p: one-sided exact sign test for mse(bilateral) > mse(baseline)"
)
_COMPARISON_COLUMNS = [
    "subject", "structure", "side",
    "delta_mse", "var_ratio_intensity", "logjstd_ratio", "sign_p",
]


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_report(records, aggregates, comparisons, outdir) -> list[Path]:
    """Write runs.csv, comparison.csv, and per-cell aggregate maps.

    Rows are emitted in sorted order and floats via repr, so re-emitting
    the same inputs is byte-identical.
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    runs_path = out / "runs.csv"
    with open(runs_path, "w", newline="") as fh:
        fh.write(_RUNS_NOTE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_RUNS_COLUMNS)
        for r in sorted(records, key=RunRecord.sort_key):
            w.writerow([
                r.subject, r.structure, r.side, r.mode, str(r.run),
                _fmt(r.mse), _fmt(r.logj_mean), _fmt(r.logj_std),
                str(r.fold_count), str(r.seed),
            ])
    written.append(runs_path)

    cmp_path = out / "comparison.csv"
    with open(cmp_path, "w", newline="") as fh:
        fh.write(_COMPARISON_NOTE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_COMPARISON_COLUMNS)
        for c in sorted(comparisons, key=lambda c: (c.subject, c.structure, c.side)):
            w.writerow([
                c.subject, c.structure, c.side,
                _fmt(c.delta_mse), _fmt(c.var_ratio_intensity),
                _fmt(c.logjstd_ratio), _fmt(c.sign_p),
            ])
    written.append(cmp_path)

    for agg in sorted(aggregates, key=CellAggregate.cell_key):
        stem = f"{agg.subject}_{agg.structure}_{agg.side}_{agg.mode}"
        for tag, img in (
            ("imean", agg.imean), ("istd", agg.istd),
            ("jmean", agg.jmean), ("jstd", agg.jstd),
        ):
            path = out / f"{stem}_{tag}.f32grid"
            write_image(img, path)
            written.append(path)
    return written


# ---------------------------------------------------------------------------
# config file


_EXPERIMENT_KEYS = {
    "seed", "runs", "structures", "sides", "modes", "timesteps",
    "beta_start", "beta_end", "gmm_components", "out",
}
_SUBJECT_KEYS = {"phantom", "seed"}
_REPAINT_KEYS = {"jump_length", "resamplings", "sigma_mode", "known_variance_index"}
_REG_KEYS = {
    "spacing", "max_iterations", "step_init", "tolerance",
    "bending_weight", "elasticity_weight",
}


def _split_list(raw: str) -> tuple[str, ...]:
    parts = tuple(p.strip() for p in raw.split(",") if p.strip())
    # preserve order, drop duplicates
    seen = []
    for p in parts:
        if p not in seen:
            seen.append(p)
    return tuple(seen)


def load_experiment_config(path) -> ExperimentConfig:
    """Parse an experiment config file.

    Sections: [experiment] (required), one or more [subject:<id>], and
    optional [repaint] and [registration]. Unknown sections or keys are
    errors. Relative phantom paths resolve against the config file's
    directory.
    """
    p = Path(path)

    def fail(msg: str):
        raise ExperimentConfigError(f"{p}: {msg}")

    try:
        text = p.read_text()
    except OSError as exc:
        fail(f"cannot read: {exc}")

    cp = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";")
    )
    try:
        cp.read_string(text, source=str(p))
    except configparser.Error as exc:
        fail(str(exc))

    if not cp.has_section("experiment"):
        fail("missing [experiment] section")
    subject_sections = []
    for name in cp.sections():
        if name == "experiment":
            _check_keys(cp, name, _EXPERIMENT_KEYS, fail)
        elif name in ("repaint", "registration"):
            _check_keys(
                cp, name,
                _REPAINT_KEYS if name == "repaint" else _REG_KEYS, fail,
            )
        elif name.startswith("subject:"):
            if not name[len("subject:"):].strip():
                fail(f"empty subject id in section [{name}]")
            _check_keys(cp, name, _SUBJECT_KEYS, fail)
            subject_sections.append(name)
        else:
            fail(f"unknown section [{name}]")
    if not subject_sections:
        fail("at least one [subject:<id>] section is required")

    def get_typed(section, key, cast, default, kind):
        if not cp.has_option(section, key):
            if default is None:
                fail(f"[{section}] is missing required key {key!r}")
            return default
        raw = cp.get(section, key)
        try:
            return cast(raw)
        except ValueError:
            fail(f"[{section}] {key} = {raw!r} is not {kind}")

    geti = lambda sec, key, dflt: get_typed(sec, key, int, dflt, "an integer")
    getf = lambda sec, key, dflt: get_typed(sec, key, float, dflt, "a number")

    master_seed = geti("experiment", "seed", None)
    runs = geti("experiment", "runs", 10)
    timesteps = geti("experiment", "timesteps", 100)
    beta_start = getf("experiment", "beta_start", 1e-4)
    beta_end = getf("experiment", "beta_end", 0.02)
    gmm_components = geti("experiment", "gmm_components", 512)
    out_dir = cp.get("experiment", "out", fallback="results").strip()

    raw_structures = cp.get("experiment", "structures", fallback="all").strip()
    structures = None if raw_structures == "all" else _split_list(raw_structures)
    if structures == ():
        fail("[experiment] structures must be 'all' or a nonempty name list")

    sides = _split_list(cp.get("experiment", "sides", fallback="left,right"))
    raw_modes = cp.get("experiment", "modes", fallback="both").strip()
    modes = MODES if raw_modes == "both" else _split_list(raw_modes)

    subjects = []
    for name in subject_sections:
        sid = name[len("subject:"):].strip()
        if not cp.has_option(name, "phantom"):
            fail(f"[{name}] is missing required key 'phantom'")
        phantom = (p.parent / cp.get(name, "phantom").strip()).resolve()
        seed = geti(name, "seed", None) if cp.has_option(name, "seed") else None
        try:
            subjects.append(SubjectSpec(sid, str(phantom), seed))
        except ValueError as exc:
            fail(str(exc))

    try:
        repaint_cfg = RepaintConfig(
            jump_length=geti("repaint", "jump_length", 1),
            resamplings=geti("repaint", "resamplings", 1),
            sigma_mode=cp.get("repaint", "sigma_mode", fallback="beta_tilde").strip(),
            known_variance_index=cp.get(
                "repaint", "known_variance_index", fallback="tm1"
            ).strip(),
        )
    except ValueError as exc:
        fail(f"[repaint] {exc}")

    try:
        reg_params = RegParams(
            spacing=getf("registration", "spacing", 2.5),
            max_iterations=geti("registration", "max_iterations", 200),
            step_init=getf("registration", "step_init", 0.5),
            tolerance=getf("registration", "tolerance", 1e-6),
            bending_weight=getf("registration", "bending_weight", 0.0),
            elasticity_weight=getf("registration", "elasticity_weight", 0.0),
        )
    except ValueError as exc:
        fail(f"[registration] {exc}")

    try:
        return ExperimentConfig(
            subjects=tuple(subjects), structures=structures, sides=sides,
            modes=modes, runs=runs, master_seed=master_seed,
            timesteps=timesteps, beta_start=beta_start, beta_end=beta_end,
            gmm_components=gmm_components, repaint=repaint_cfg,
            registration=reg_params, out_dir=out_dir,
        )
    except ValueError as exc:
        fail(str(exc))


def _check_keys(cp, section, allowed, fail):
    for key in cp.options(section):
        if key not in allowed:
            fail(f"unknown key {key!r} in [{section}]")


# ---------------------------------------------------------------------------
# orchestration


@dataclass(frozen=True)
class _PreparedSubject:
    subject_id: str
    image: Image
    atlas: StructureAtlas
    denoiser: AnalyticDenoiser


def _preflight(config: ExperimentConfig):
    """Parse every phantom spec and resolve the structure list.

    All problems are gathered and raised together, before any job runs or
    any output is written.
    """
    specs = {}
    problems = []
    spec_cache = {}
    for sub in config.subjects:
        try:
            if sub.phantom_path not in spec_cache:
                spec_cache[sub.phantom_path] = parse_phantom_spec(sub.phantom_path)
            specs[sub.subject_id] = spec_cache[sub.phantom_path]
        except ValueError as exc:
            problems.append(f"subject {sub.subject_id}: {exc}")
    if problems:
        raise ExperimentConfigError(
            "preflight failed:\n  " + "\n  ".join(problems)
        )

    if config.structures is not None:
        structures = config.structures
    else:
        first = specs[config.subjects[0].subject_id]
        structures = tuple(sorted(s.name for s in first.structures))
        if not structures:
            problems.append(
                f"subject {config.subjects[0].subject_id}: phantom has no structures"
            )
    for sub in config.subjects:
        have = {s.name for s in specs[sub.subject_id].structures}
        for s in structures:
            if s not in have:
                problems.append(
                    f"subject {sub.subject_id}: structure {s!r} not in phantom"
                )
    if problems:
        raise ExperimentConfigError(
            "preflight failed:\n  " + "\n  ".join(problems)
        )
    return specs, structures


def plan_jobs(config: ExperimentConfig) -> list[tuple[str, str, str, str, int]]:
    """The cell grid as (subject, structure, side, mode, runs) tuples.

    Runs preflight validation but renders nothing and writes nothing.
    """
    _, structures = _preflight(config)
    return [
        (sub.subject_id, s, k, mode, config.runs)
        for sub in config.subjects
        for s in structures
        for k in config.sides
        for mode in config.modes
    ]


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """Execute the full grid and aggregate it.

    jobs caps the worker-thread count; per-run seed derivation makes the
    output independent of it.
    """
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    specs, structures = _preflight(config)
    try:
        sched = make_linear_schedule(
            config.beta_start, config.beta_end, config.timesteps
        )
    except ValueError as exc:
        raise ExperimentConfigError(str(exc)) from exc

    gmm_cache = {}
    prepared = []
    for sub in config.subjects:
        spec = specs[sub.subject_id]
        cache_key = (sub.phantom_path, config.gmm_components)
        if cache_key not in gmm_cache:
            gmm_cache[cache_key] = gmm_from_spec(spec, config.gmm_components)
        if sub.seed is not None:
            rng = rng_from_seed(sub.seed)
        else:
            rng = derive_rng(config.master_seed, "phantom", sub.subject_id)
        sample = generate(spec, rng)
        prepared.append(_PreparedSubject(
            subject_id=sub.subject_id,
            image=sample.image,
            atlas=sample.atlas,
            denoiser=AnalyticDenoiser(gmm_cache[cache_key], sched),
        ))

    grid = [
        (ps, s, k, mode, i)
        for ps in prepared
        for s in structures
        for k in config.sides
        for mode in config.modes
        for i in range(config.runs)
    ]

    def work(job):
        ps, s, k, mode, i = job
        seed = derive_seed(config.master_seed, ps.subject_id, s, k, mode, i)
        return _single_run(
            ps.subject_id, ps.image, ps.atlas, s, k, mode, i, seed,
            ps.denoiser, sched, config.repaint, config.registration,
        )

    if jobs == 1:
        records = [work(j) for j in grid]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(work, grid))
    records.sort(key=RunRecord.sort_key)

    atlas_by_subject = {ps.subject_id: ps.atlas for ps in prepared}
    cells: dict[tuple, list[RunRecord]] = {}
    for r in records:
        cells.setdefault(r.sort_key()[:4], []).append(r)
    aggregates = []
    for (subject, s, k, mode), cell_records in sorted(cells.items()):
        region = atlas_by_subject[subject].get(s, k)
        aggregates.append(aggregate(cell_records, region))

    comparisons = symmetry_comparison(records, aggregates)
    return ExperimentResult(
        records=tuple(records),
        aggregates=tuple(aggregates),
        comparisons=tuple(comparisons),
    )


def run_and_report(config: ExperimentConfig, outdir=None, jobs: int = 1) -> list[Path]:
    """Run the experiment and write its report.

    A .partial marker is created before work starts and removed only after
    every output file is written; an interrupted run leaves it behind.
    Preflight validation runs first, so a misconfigured experiment writes
    nothing at all.
    """
    _preflight(config)
    out = Path(outdir) if outdir is not None else Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / PARTIAL_MARKER
    marker.write_text("experiment in progress or interrupted\n")
    result = run_experiment(config, jobs=jobs)
    written = emit_report(
        result.records, result.aggregates, result.comparisons, out
    )
    marker.unlink()
    return written
