"""
Variance propagation of routed vs. unrouted textual feedback, and the
depth / attribution harnesses built on top of the execution graph.

Linear additive noise model, k steps away from the output node:
    standard: N_k = N_{k-1} + d_k                      Var = k * s2
    routed:   N_k = (1 - Z_k) * (N_{k-1} + d_k)        Var = s2 * sum_{i=1..k} (1-p)^i
with d_k mean-zero, variance s2, and Z_k ~ Bernoulli(p) independent of d_k.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from exceptions import DepthTooSmall, InterventionError, MisalignedRecords, NodeNotFound, SimulationError
from models import ComponentSpec, Context, Graph, Trajectory, UpstreamKind

logger = logging.getLogger(__name__)

BLOCK_TRIALS = 8192
NOISE_KINDS = ("normal", "rademacher")


@dataclass(frozen=True)
class NoiseModelParams:
    sigma2: float
    p: float
    depth: int
    trials: int
    seed: int = 42
    noise: str = "normal"

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise SimulationError("sigma2 must be positive")
        if not 0.0 <= self.p <= 1.0:
            raise SimulationError("p must lie in [0, 1]")
        if self.depth < 1:
            raise SimulationError("depth must be at least 1")
        if self.trials < 2:
            raise SimulationError("trials must be at least 2")
        if self.noise not in NOISE_KINDS:
            raise SimulationError(f"noise must be one of {NOISE_KINDS}")


@dataclass(frozen=True)
class DepthStats:
    depth: int
    routed_var: float
    standard_var: float
    routed_closed: float
    standard_closed: float
    routed_se: float
    standard_se: float
    routed_mean: float
    standard_mean: float
    routed_mean_se: float
    standard_mean_se: float


@dataclass(frozen=True)
class SimResult:
    params: NoiseModelParams
    depths: tuple

    def column(self, name):
        return np.array([getattr(d, name) for d in self.depths])

    def to_frame(self):
        rows = []
        for d in self.depths:
            rows.append((d.depth, "routed", d.routed_var, d.routed_closed, d.routed_se))
            rows.append((d.depth, "standard", d.standard_var, d.standard_closed, d.standard_se))
        return pd.DataFrame(rows, columns=["depth", "model", "empirical_var", "closed_var", "stderr"])

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False)


def variance_closed_form(k, sigma2, p, routed):
    if k < 0:
        raise SimulationError("depth must be non-negative")
    if not routed or p == 0.0:
        return k * sigma2
    q = 1.0 - p
    # sigma2 * (q + q^2 + ... + q^k)
    return sigma2 * q * (1.0 - q ** k) / p


def variance_limit(sigma2, p):
    if p <= 0.0:
        return float("inf")
    return sigma2 * (1.0 - p) / p


def _draw_noise(rng, kind, sigma2, shape):
    if kind == "rademacher":
        return np.sqrt(sigma2) * rng.choice(np.array([-1.0, 1.0]), size=shape)
    return rng.normal(0.0, np.sqrt(sigma2), size=shape)


def _simulate_block(params, block_index, size):
    """Raw moment sums per depth for one block of independent chains"""
    rng = np.random.default_rng([params.seed, block_index])
    deltas = _draw_noise(rng, params.noise, params.sigma2, (size, params.depth))
    filtered = rng.random((size, params.depth)) < params.p

    standard = np.cumsum(deltas, axis=1)
    routed = np.empty_like(deltas)
    current = np.zeros(size)
    for k in range(params.depth):
        current = np.where(filtered[:, k], 0.0, current + deltas[:, k])
        routed[:, k] = current

    def moments(values):
        return np.stack([(values ** power).sum(axis=0) for power in (1, 2, 3, 4)])

    return moments(routed), moments(standard)


def _summarize(sums, n):
    """Unbiased variance, its standard error, mean and the mean's standard error"""
    m1, m2, m3, m4 = (sums[i] / n for i in range(4))
    mean = m1
    central2 = m2 - mean ** 2
    central4 = m4 - 4 * mean * m3 + 6 * mean ** 2 * m2 - 3 * mean ** 4
    var = central2 * n / (n - 1)
    var_se = np.sqrt(np.maximum(central4 - central2 ** 2, 0.0) / n)
    mean_se = np.sqrt(np.maximum(var, 0.0) / n)
    return np.maximum(var, 0.0), var_se, mean, mean_se


def simulate_noise_chain(params, workers=1):
    """Monte Carlo over `trials` chains; blocks are seeded by (seed, block) so workers do not change the result"""
    blocks = []
    remaining = params.trials
    while remaining > 0:
        size = min(BLOCK_TRIALS, remaining)
        blocks.append((len(blocks), size))
        remaining -= size

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="Sim") as pool:
            partials = list(pool.map(lambda b: _simulate_block(params, *b), blocks))
    else:
        partials = [_simulate_block(params, *b) for b in blocks]

    routed_sums = sum(p[0] for p in partials)
    standard_sums = sum(p[1] for p in partials)
    r_var, r_se, r_mean, r_mean_se = _summarize(routed_sums, params.trials)
    s_var, s_se, s_mean, s_mean_se = _summarize(standard_sums, params.trials)

    depths = tuple(
        DepthStats(
            depth=k + 1,
            routed_var=float(r_var[k]),
            standard_var=float(s_var[k]),
            routed_closed=variance_closed_form(k + 1, params.sigma2, params.p, routed=True),
            standard_closed=variance_closed_form(k + 1, params.sigma2, params.p, routed=False),
            routed_se=float(r_se[k]),
            standard_se=float(s_se[k]),
            routed_mean=float(r_mean[k]),
            standard_mean=float(s_mean[k]),
            routed_mean_se=float(r_mean_se[k]),
            standard_mean_se=float(s_mean_se[k]),
        )
        for k in range(params.depth)
    )
    logger.info(f"Simulated {params.trials} chains to depth {params.depth} (p={params.p}, "
                f"sigma2={params.sigma2}, {len(blocks)} blocks)")
    return SimResult(params=params, depths=depths)


def fit_slope(ks, values):
    """Least-squares slope of values against depth"""
    slope, _ = np.polyfit(np.asarray(ks, dtype=float), np.asarray(values, dtype=float), 1)
    return float(slope)


# Depth chains

def _fresh_name(base, taken):
    name = base
    suffix = 1
    while name in taken:
        suffix += 1
        name = f"{base}_{suffix}"
    return name


def build_identity_chain(base, depth):
    """Insert identity tool nodes after the first component until the graph has `depth` nodes"""
    count = len(base.components)
    if count == 0 or depth < count:
        raise DepthTooSmall(f"target depth {depth} is smaller than the base graph ({count} components)")
    extra = depth - count
    if extra == 0:
        return base

    head = base.components[0]
    source = head.output_fields[0]
    taken = set(base.task_fields) | {f for c in base.components for f in c.output_fields}
    taken_ids = set(base.ids)

    identities = []
    previous = source
    for n in range(1, extra + 1):
        output = _fresh_name(f"{source}_id{n}", taken)
        taken.add(output)
        node_id = _fresh_name(f"identity_{n}", taken_ids)
        taken_ids.add(node_id)
        identities.append(
            ComponentSpec(
                id=node_id,
                role_description=f"Lossless re-write of '{source}'",
                prompt_text="",
                input_fields=(previous,),
                output_fields=(output,),
                optimizable=False,
                is_tool=True,
            )
        )
        previous = output

    rewired = [
        replace(comp, input_fields=tuple(previous if f == source else f for f in comp.input_fields))
        for comp in base.components[1:]
    ]
    return Graph(task_fields=base.task_fields, components=(head, *identities, *rewired))


# Batch-shuffling intervention

@dataclass(frozen=True)
class ShuffleResult:
    batch: tuple
    permutation: tuple
    truth: dict


def derangement(n, rng):
    """Sattolo's algorithm: a uniformly random cyclic permutation, fixed-point free for n >= 2"""
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def shuffle_intervention(batch, node_id, seed=42):
    """Give every trajectory another trajectory's output for `node_id` and rewrite what consumed it.

    Returns the perturbed batch and the ground truth: every component whose
    input depended (directly or transitively) on the shuffled output is labelled
    "upstream".
    """
    batch = list(batch)
    if len(batch) < 2:
        raise InterventionError("batch shuffling needs at least two trajectories")
    for index, trajectory in enumerate(batch):
        if trajectory.entry(node_id) is None:
            raise NodeNotFound(node_id, index)

    perm = derangement(len(batch), np.random.default_rng(seed))
    perturbed = []
    truth = {}
    for index, trajectory in enumerate(batch):
        donor = batch[perm[index]].entry(node_id).output
        replaced = dict(donor.items())
        tainted = set(replaced)
        entries = []
        for entry in trajectory.entries:
            if entry.component_id == node_id:
                entries.append(replace(entry, output=donor))
                continue
            if tainted & set(entry.input_slice):
                new_slice = Context(
                    (name, replaced.get(name, value)) for name, value in entry.input_slice.items()
                )
                entries.append(replace(entry, input_slice=new_slice))
                truth[(index, entry.component_id)] = "upstream"
                tainted.update(entry.output)
            else:
                entries.append(entry)
        final = Context(
            (name, replaced.get(name, value)) for name, value in trajectory.final_context.items()
        )
        perturbed.append(Trajectory(trajectory.task_input, tuple(entries), final))

    logger.info(f"Shuffled outputs of {node_id} across {len(batch)} trajectories")
    return ShuffleResult(batch=tuple(perturbed), permutation=tuple(perm), truth=truth)


def attribution_accuracy(records, ground_truth, components=None):
    """Fraction of routing records whose class (upstream feedback vs. local) matches the truth.

    `components` restricts scoring to the named nodes (e.g. the ones downstream of the shuffle).
    """
    records = list(records)
    if components is not None:
        wanted = set(components)
        records = [r for r in records if r.component in wanted]
    if not records:
        raise MisalignedRecords("no routing records to score")
    correct = 0
    for record in records:
        key = (record.example, record.component)
        if key not in ground_truth:
            raise MisalignedRecords(f"no ground truth for example {record.example}, node {record.component}")
        predicted = "upstream" if record.upstream is UpstreamKind.FEEDBACK else "local"
        correct += predicted == ground_truth[key]
    return correct / len(records)
