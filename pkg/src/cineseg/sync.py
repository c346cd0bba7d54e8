"""Shot-to-synopsis synchronization by expectation maximization.

The E-step is closed form: a shot-sentence pair is assigned (w_ij = 1)
exactly when its cosine similarity clears the sentence's threshold
lambda_j (a high percentile of column j, 99th by default) and the pair
lies inside a diagonal band of half-width xi. That binary matrix is the
exact maximizer of sum_ij w_ij * (m_ij - lambda_j) over in-band binary
matrices, because the objective separates per cell.

The M-step trains the feature extractors with a symmetric multi-positive
contrastive loss over a batch of movies. Queries are shots in one
direction and sentences in the other; positives come from the E-step,
negatives are out-of-band pairs of the same movie plus every pair
across movies, and in-band non-positives of the same movie are left out
of the denominator entirely. Temperature is learned in log space and
clamped to [1e-3, 10].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import alignfuse as af
from . import numcore as nc
from .errors import ContractError, ShapeError
from .numcore import Tensor

log = logging.getLogger(__name__)

DEFAULT_BAND_XI = 0.3
DEFAULT_PERCENTILE = 99.0
TAU_INIT = 0.07
LOG_TAU_MIN = float(np.log(1e-3))
LOG_TAU_MAX = float(np.log(10.0))
_MASK_OFF = -1e9  # additive mask; keeps every intermediate finite


@dataclass
class SimilarityMatrix:
    """Cosine similarities between shot and sentence features."""

    values: np.ndarray  # [num_shots x num_sentences]
    u: np.ndarray  # unit-norm shot features
    v: np.ndarray  # unit-norm sentence features


@dataclass
class SyncMatrix:
    """Binary shot-to-sentence assignment with the thresholds that made it."""

    w: np.ndarray  # [num_shots x num_sentences] in {0,1}
    xi: float
    lambdas: np.ndarray  # per-sentence thresholds


def compute_similarity(u: np.ndarray, v: np.ndarray) -> SimilarityMatrix:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
        raise ShapeError(f"incompatible feature shapes {u.shape} and {v.shape}")
    return SimilarityMatrix(u @ v.T, u, v)


def lambda_per_sentence(values: np.ndarray, percentile: float = DEFAULT_PERCENTILE) -> np.ndarray:
    """Per-sentence threshold: the given percentile of each similarity column,
    with linear interpolation between order statistics."""
    return np.percentile(values, percentile, axis=0, method="linear")


def band_mask(num_shots: int, num_sentences: int, xi: float = DEFAULT_BAND_XI) -> np.ndarray:
    """Diagonal band: pairs whose positions agree up to a xi fraction slack."""
    i = np.arange(num_shots)[:, None]
    j = np.arange(num_sentences)[None, :]
    lo = j < i * (num_sentences / num_shots) + xi * num_sentences
    hi = i < j * (num_shots / num_sentences) + xi * num_shots
    return lo & hi


def e_step(values: np.ndarray, lambdas: np.ndarray, xi: float = DEFAULT_BAND_XI) -> SyncMatrix:
    """Closed-form assignment: w_ij = 1 iff m_ij >= lambda_j and in band."""
    values = np.asarray(values, dtype=np.float64)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.shape != (values.shape[1],):
        raise ShapeError(f"{lambdas.shape[0]} thresholds for {values.shape[1]} sentences")
    band = band_mask(values.shape[0], values.shape[1], xi)
    w = ((values >= lambdas[None, :]) & band).astype(np.float64)
    return SyncMatrix(w, xi, lambdas)


class SyncHead:
    """Shared projection to the synchronization space plus the temperature.

    One linear map serves both shot and synopsis fused features (their
    widths must match), followed by row L2-normalization, so similarities
    are cosines. The temperature parameter lives in log space.
    """

    def __init__(self, fused_width: int, proj_dim: int, seed):
        rng = np.random.default_rng(seed)
        limit = np.sqrt(6.0 / (fused_width + proj_dim))
        self.params: dict[str, Tensor] = {
            "sync.proj.w": Tensor(
                rng.uniform(-limit, limit, size=(fused_width, proj_dim)), requires_grad=True
            ),
            "sync.proj.b": Tensor(np.zeros(proj_dim), requires_grad=True),
            "sync.log_tau": Tensor(np.log(TAU_INIT), requires_grad=True),
        }
        self.proj_dim = proj_dim
        self.fused_width = fused_width

    def features(self, fused: Tensor) -> Tensor:
        """Project fused rows into the sync space and L2-normalize them."""
        if fused.shape[-1] != self.fused_width:
            raise ShapeError(
                f"sync head expects width {self.fused_width}, got {fused.shape[-1]}"
            )
        x = nc.add(nc.matmul(fused, self.params["sync.proj.w"]), self.params["sync.proj.b"])
        return nc.normalize_rows(x)

    def tau(self) -> Tensor:
        return nc.exp(self.params["sync.log_tau"])

    def clamp_tau(self) -> None:
        data = self.params["sync.log_tau"].data
        np.clip(data, LOG_TAU_MIN, LOG_TAU_MAX, out=data)


def m_step_loss(terms, tau: Tensor) -> Tensor:
    """Symmetric multi-positive contrastive loss over one batch of movies.

    terms: per movie (u, v, w, band) with u [L_sh x P] and v [L_syn x P]
    unit-norm feature tensors, w the binary assignment, band the in-band
    mask. Each direction averages the per-query loss over queries that
    have at least one positive; queries without positives are skipped
    with a warning. Returns the sum of the two directions.
    """
    if not terms:
        raise ContractError("m_step_loss needs at least one movie")
    u_all = terms[0][0] if len(terms) == 1 else nc.concat([t[0] for t in terms], -2)
    v_all = terms[0][1] if len(terms) == 1 else nc.concat([t[1] for t in terms], -2)
    total_sh, total_syn = u_all.shape[0], v_all.shape[0]

    pos = np.zeros((total_sh, total_syn))
    cand = np.ones((total_sh, total_syn), dtype=bool)
    oi = oj = 0
    for u, v, w, band in terms:
        ns, ny = u.shape[0], v.shape[0]
        if w.shape != (ns, ny) or band.shape != (ns, ny):
            raise ShapeError(f"assignment shape {w.shape} does not match features ({ns}, {ny})")
        block = (slice(oi, oi + ns), slice(oj, oj + ny))
        pos[block] = w
        cand[block] = (w > 0) | ~band
        oi += ns
        oj += ny
    if ((pos > 0) & ~cand).any():
        raise ContractError("every positive must be a candidate key")

    mask_add = np.where(cand, 0.0, _MASK_OFF)
    sims = nc.add(nc.div(nc.matmul(u_all, nc.transpose(v_all)), tau), mask_add)

    row_pos = pos.sum(axis=1)
    col_pos = pos.sum(axis=0)
    n_row = int((row_pos > 0).sum())
    n_col = int((col_pos > 0).sum())
    skipped = (total_sh - n_row) + (total_syn - n_col)
    if skipped:
        log.warning(
            "contrastive loss: skipped %d queries with no positive key "
            "(%d of %d shots, %d of %d sentences kept)",
            skipped, n_row, total_sh, n_col, total_syn,
        )

    pieces = []
    if n_row:
        weights = np.divide(pos, row_pos[:, None], out=np.zeros_like(pos), where=row_pos[:, None] > 0)
        pieces.append(nc.neg(nc.sum_all(nc.mul(nc.log_softmax(sims, axis=1), weights / n_row))))
    if n_col:
        weights = np.divide(pos, col_pos[None, :], out=np.zeros_like(pos), where=col_pos[None, :] > 0)
        pieces.append(nc.neg(nc.sum_all(nc.mul(nc.log_softmax(sims, axis=0), weights / n_col))))
    if not pieces:
        log.warning("contrastive loss: no query had a positive key; returning zero")
        return Tensor(0.0)
    return pieces[0] if len(pieces) == 1 else nc.add(pieces[0], pieces[1])


def sync_features(shot_model, synopsis_model, head: SyncHead, shot_feats, synopsis_feats):
    """Evaluation-mode unit-norm sync features (u, v) for one movie."""
    u = head.features(af.encode_sequence(shot_model, shot_feats))
    v = head.features(af.encode_sequence(synopsis_model, [synopsis_feats]))
    return u.data, v.data


def run_e_step(
    shot_model,
    synopsis_model,
    head: SyncHead,
    movie_inputs,
    xi: float = DEFAULT_BAND_XI,
    percentile: float = DEFAULT_PERCENTILE,
):
    """E-step over every movie with the current parameters (no gradients)."""
    syncs = []
    for shot_feats, synopsis_feats in movie_inputs:
        u, v = sync_features(shot_model, synopsis_model, head, shot_feats, synopsis_feats)
        sim = compute_similarity(u, v)
        syncs.append(e_step(sim.values, lambda_per_sentence(sim.values, percentile), xi))
    return syncs


def em_run(
    movie_inputs,
    shot_model,
    synopsis_model,
    head: SyncHead,
    iterations: int,
    optimizer,
    steps_per_iteration: int = 1,
    xi: float = DEFAULT_BAND_XI,
    percentile: float = DEFAULT_PERCENTILE,
    rng: np.random.Generator | None = None,
):
    """Alternate the closed-form E-step with contrastive gradient steps.

    movie_inputs: per movie (shot feature matrices, synopsis matrix).
    Returns (per-movie SyncMatrix from a final E-step, history records).
    """
    if iterations < 1:
        raise ContractError("em_run needs at least one iteration")
    history = []
    bands = {}
    for it in range(iterations):
        syncs = run_e_step(shot_model, synopsis_model, head, movie_inputs, xi, percentile)
        for step_idx in range(steps_per_iteration):
            optimizer.zero_grad()
            with nc.Tape() as tape:
                terms = []
                for (shot_feats, synopsis_feats), sm in zip(movie_inputs, syncs):
                    u = head.features(af.encode_sequence(shot_model, shot_feats, rng))
                    v = head.features(
                        af.encode_sequence(synopsis_model, [synopsis_feats], rng)
                    )
                    dims = sm.w.shape
                    if dims not in bands:
                        bands[dims] = band_mask(dims[0], dims[1], xi)
                    terms.append((u, v, sm.w, bands[dims]))
                loss = m_step_loss(terms, head.tau())
            if loss.requires_grad:
                nc.backward(tape, loss)
                optimizer.step()
                head.clamp_tau()
            history.append(
                {"iteration": it, "step": step_idx, "contrastive_loss": float(loss.data)}
            )
    return run_e_step(shot_model, synopsis_model, head, movie_inputs, xi, percentile), history


# ---- exports ----


def _rle_encode(row: np.ndarray) -> list[int]:
    # run lengths of alternating values, starting with the zero run
    runs = []
    current, count = 0, 0
    for value in row:
        value = int(value)
        if value == current:
            count += 1
        else:
            runs.append(count)
            current, count = value, 1
    runs.append(count)
    return runs


def _rle_decode(runs: list[int], length: int) -> np.ndarray:
    row = np.zeros(length)
    pos, value = 0, 0
    for count in runs:
        if value:
            row[pos:pos + count] = 1.0
        pos += count
        value = 1 - value
    if pos != length:
        raise ContractError(f"run lengths cover {pos} of {length} entries")
    return row


def sync_to_json(sm: SyncMatrix) -> dict:
    """JSON-ready dict: dimensions, band width, thresholds, RLE rows."""
    return {
        "shots": int(sm.w.shape[0]),
        "sentences": int(sm.w.shape[1]),
        "xi": float(sm.xi),
        "lambdas": [float(x) for x in sm.lambdas],
        "rows": [_rle_encode(row) for row in sm.w],
    }


def sync_from_json(payload: dict) -> SyncMatrix:
    w = np.stack(
        [_rle_decode(runs, payload["sentences"]) for runs in payload["rows"]]
    ) if payload["rows"] else np.zeros((0, payload["sentences"]))
    return SyncMatrix(w, float(payload["xi"]), np.asarray(payload["lambdas"]))


def write_pgm(matrix: np.ndarray, path) -> None:
    """Render a matrix as a binary-format portable graymap (min-max scaled)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    lo, hi = matrix.min(), matrix.max()
    scaled = np.zeros_like(matrix) if hi == lo else (matrix - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    header = f"P5\n{matrix.shape[1]} {matrix.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + pixels.tobytes())
