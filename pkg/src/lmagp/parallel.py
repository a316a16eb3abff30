"""Message-passing execution of the summary predictor across M workers.

One logical worker per train block plus a dedicated master (id 0),
multiplexed onto a bounded thread pool.  Workers are isolated state
machines: all exchange goes through mailbox messages, every reduction
is performed in ascending block order, and each phase is a barrier, so
results are identical for any physical thread count.

Phases:

  setup      each worker factors its shard and computes its within-band
             residual blocks locally
  recursion  step i produces the upper (B+i)-diagonal blocks of both
             the train/test cross rows (forward sweep) and the
             train-train rows feeding the transpose trick; each active
             worker relays the row stack its left neighbour needs next
  lower      transposed test-row blocks are delivered to the B+1
             workers whose rows they complete, which then close out
             their residual rows
  summaries  local summaries; contributions stream to the master
  scatter    master reduces the global summary (ascending block order)
             and scatters the per-worker tuples
  predict    each worker predicts its own test block; master gathers

BLAS pools are pinned to one thread inside the engine so repeated runs
are bit-identical regardless of scheduling.
"""

from __future__ import annotations

import gc
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor, TimeoutError as FuturesTimeout
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .baselines import Prediction
from .blockmat import ResidualOps, chol_solve, cholesky_jittered, conditioner_from_pointsets, half_solve
from .data import Dataset
from .kernel import Hyperparams, PointSet, gram, prior_mean
from .lma import (
    LmaConfig,
    GlobalSummary,
    QRowFactory,
    combined_local_summary,
    exact_cross_block,
    global_summary,
    lma_predict_summary,
    recurse_step,
    setup_problem,
    summary_contribution,
    uband_rprime,
    _test_pointset,
)
from .partition import BlockPartition, SupportSet

__all__ = [
    "ProtocolError",
    "AbortedRunError",
    "Message",
    "WorkerShard",
    "RunStats",
    "compute_rbar_cross_parallel",
    "run_parallel_lma",
    "expected_message_count",
    "speedup_report",
]

_PHASE_TIMEOUT_S = 600.0


def _raise_mmap_threshold():
    """Keep large temporaries on the reusable heap.

    Worker threads allocate wide row buffers constantly; when glibc
    services those with mmap, the resulting page faults serialize on the
    process memory lock and erase the thread-level speedup.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 256 * 1024 * 1024)  # M_MMAP_THRESHOLD
    except (OSError, AttributeError):  # pragma: no cover - non-glibc platforms
        pass


_raise_mmap_threshold()


@contextmanager
def _gc_paused():
    """Pause cyclic GC during phase execution.

    Collector scans run with the GIL held and stall every worker thread;
    the engine itself allocates little cyclic garbage, and reference
    counting still reclaims the arrays.
    """
    was_enabled = gc.isenabled()
    if was_enabled:
        gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


class ProtocolError(Exception):
    """Communication contract violation (exit code 4 at the CLI)."""


class AbortedRunError(Exception):
    """A worker failed; carries the phase and worker id."""

    def __init__(self, phase: str, worker: int, cause: BaseException):
        super().__init__(f"worker {worker} failed in phase {phase}: {cause!r}")
        self.phase = phase
        self.worker = worker
        self.cause = cause


@dataclass
class Message:
    """One point-to-point message; payload arrays plus block coordinates."""

    seq: int
    kind: str  # rbar-block | local-summary | global-summary | prediction
    src: int
    dst: int
    rows: int
    cols: int
    nbytes: int
    phase: str
    step: int
    block: tuple
    payload: object


@dataclass
class WorkerShard:
    """Data held by one logical worker.

    Per the storage contract the worker owns the training data of its
    own block and its conditioning band.  It additionally holds
    coordinate-only views of the next band (recursion inputs), the full
    test coordinates (local summaries are full-test-width), and a copy
    of the support set.
    """

    m: int
    bandwidth: int
    block_idx: dict          # k -> train indices, for k in [m, m+2B] cap M
    d_points: dict           # k -> PointSet, same keys
    y: dict                  # k -> outputs, only for k in [m, m+B]
    s_points: PointSet
    test_points: PointSet
    test_blocks: tuple
    h: Hyperparams

    def owned_rows(self):
        hi = min(self.m + self.bandwidth, len(self.test_blocks))
        return list(range(self.m, hi + 1))


@dataclass
class RunStats:
    M: int
    bandwidth: int
    threads: int
    wall_time_s: float = 0.0
    phase_times_s: dict = field(default_factory=dict)
    message_count: int = 0
    message_bytes: int = 0
    kind_counts: dict = field(default_factory=dict)
    recursion_steps_up: int = 0
    recursion_steps_transpose: int = 0
    trace: list = field(default_factory=list)


def expected_message_count(M: int, B: int) -> int:
    """Closed-form message count of the phase plan."""
    relay = max(0, (M - B - 1) * (M - B - 2) // 2)
    lower_blocks = max(0, (M - B - 1) * (M - B) // 2)
    return 2 * relay + (B + 1) * lower_blocks + 3 * M


class _Mailboxes:
    def __init__(self, trace_enabled: bool):
        self._lock = threading.Lock()
        self._seq = 0
        self._boxes: dict = {}
        self.log: list = []
        self._trace_enabled = trace_enabled

    def send(self, kind, src, dst, payload, phase, step, block, arrays):
        nbytes = sum(int(a.nbytes) for a in arrays)
        rows, cols = (arrays[0].shape + (1, 1))[:2] if arrays else (0, 0)
        with self._lock:
            self._seq += 1
            msg = Message(self._seq, kind, src, dst, rows, cols, nbytes, phase, step, block, payload)
            self._boxes.setdefault(dst, []).append(msg)
            self.log.append(msg)

    def drain(self, dst: int):
        """All pending messages for ``dst``, in deterministic (src, seq) order."""
        with self._lock:
            msgs = self._boxes.pop(dst, [])
        return sorted(msgs, key=lambda m: (m.src, m.seq))


def _build_shards(
    train: Dataset, tp: PointSet, part: BlockPartition, support: SupportSet,
    h: Hyperparams, bandwidth: int,
):
    shards = {}
    M = part.M
    for m in range(1, M + 1):
        hi_data = min(m + bandwidth, M)
        hi_coord = min(m + 2 * bandwidth, M)
        block_idx = {k: part.train_blocks[k - 1] for k in range(m, hi_coord + 1)}
        d_points = {k: train.points(idx) for k, idx in block_idx.items()}
        y = {k: train.y[block_idx[k]] for k in range(m, hi_data + 1)}
        shards[m] = WorkerShard(
            m, bandwidth, block_idx, d_points, y,
            support.points(train), tp, part.test_blocks, h,
        )
    return shards


class _Engine:
    """Phase scheduler for one parallel run."""

    def __init__(self, train, test, h, config: LmaConfig, threads: int, want_cov: bool):
        if config.blocks < 2 or config.markov_order < 1:
            raise ValueError(
                "parallel run requires markov_order >= 1 and at least 2 blocks"
            )
        self.h = h
        self.config = config
        self.threads = max(1, int(threads))
        # Oversubscribing the physical cores only adds contention; the
        # logical workers multiplex onto at most one thread per core.
        self.pool_size = max(1, min(self.threads, os.cpu_count() or 1))
        self.want_cov = want_cov
        self.part, self.support, _ = setup_problem(train, test, h, config)
        self.tp = _test_pointset(train, test)
        self.M = self.part.M
        self.B = config.markov_order
        self.shards = _build_shards(train, self.tp, self.part, self.support, h, self.B)
        self.mail = _Mailboxes(trace_enabled=True)
        self.stats = RunStats(self.M, self.B, self.threads)
        # Read-only test-point structure shared by every worker, including
        # the support/test Gram (coordinate-derived, provisioned like the
        # coordinates themselves).
        self.u_points = {
            n: self.tp.take(self.part.test_blocks[n - 1]) for n in range(1, self.M + 1)
        }
        self.u_all = self.tp.take(self.part.test_perm())
        self.u_sizes = [len(b) for b in self.part.test_blocks]
        # effective_support may prune numerically dependent points; the
        # workers repeat the same deterministic pruning
        ref_ops = ResidualOps(train, self.support, h)
        self.su = gram(ref_ops.s_points, self.u_all, h)
        # Per-worker mutable state, touched only by that worker's tasks.
        self.state = {m: {} for m in range(1, self.M + 1)}
        self.master: dict = {}
        self._pool = None

    # -- scheduling ---------------------------------------------------------

    def _run_phase(self, phase: str, tasks: dict, step: int = 0):
        """Run worker tasks as a barrier phase; propagate the first failure."""
        t0 = time.perf_counter()
        futures = {self._pool.submit(fn): worker for worker, fn in tasks.items()}
        for fut, worker in futures.items():
            try:
                fut.result(timeout=_PHASE_TIMEOUT_S)
            except (FuturesTimeout, TimeoutError) as exc:
                raise ProtocolError(
                    f"phase {phase} step {step}: worker {worker} timed out"
                ) from exc
            except (ProtocolError, AbortedRunError):
                raise
            except BaseException as exc:
                raise AbortedRunError(f"{phase}[{step}]", worker, exc) from exc
        self.stats.phase_times_s[f"{phase}[{step}]" if step else phase] = (
            time.perf_counter() - t0
        )

    def _expect(self, msgs, worker, phase, what):
        if not msgs:
            excerpt = "\n".join(
                f"  seq={m.seq} {m.kind} {m.src}->{m.dst} {m.rows}x{m.cols}"
                for m in self.mail.log[-8:]
            )
            raise ProtocolError(
                f"worker {worker}, phase {phase}: missing {what}; recent messages:\n{excerpt}"
            )
        return msgs

    # -- phase bodies -------------------------------------------------------

    def _setup_worker(self, m: int):
        sh = self.shards[m]
        st = self.state[m]
        st["ops"] = ResidualOps.from_points(sh.s_points, self.h)
        ops = st["ops"]
        idx_b = self.part.band_after(m, self.B)
        pb = None
        if idx_b.size:
            coords = np.vstack([sh.d_points[k].coords for k in range(m + 1, min(m + self.B, self.M) + 1)])
            ids = np.concatenate([sh.d_points[k].ids for k in range(m + 1, min(m + self.B, self.M) + 1)])
            pb = PointSet(coords, ids)
        st["band_points"] = pb
        st["cond"] = conditioner_from_pointsets(
            ops, m, self.B, self.part.train_blocks[m - 1], idx_b, sh.d_points[m], pb
        )
        st["u_points"] = self.u_points
        qf = QRowFactory(ops, self.u_all, self.u_sizes, su=self.su)
        st["qf"] = qf
        if m < self.M - self.B:
            st["rpu"] = uband_rprime(ops, st["cond"], st["u_points"][m], pb)
        # Workers keep residual rows only; the low-rank part is carried
        # through the small row weights and folded in at the end, so the
        # band rows held for the conditioning correction never cost a
        # full-width projection product.
        st["g_s"] = {k: ops.sigma_s(sh.d_points[k]) for k in sh.owned_rows()}
        wg = {k: qf.row_weights(st["g_s"][k]) for k in sh.owned_rows()}
        st["wg"] = wg
        n_u = len(self.u_all)
        # every block of a residual row is written exactly once (band in
        # setup, the rest in collect), so the buffers can stay raw
        st["rbar_rows"] = {
            k: np.empty((sh.d_points[k].coords.shape[0], n_u)) for k in sh.owned_rows()
        }
        st["rbar_du"] = {}    # (k, n) -> residual cross block (recursion inputs/results)
        st["rbar_dd"] = {}    # (k, q) -> residual train-train block (transpose path)
        for k in sh.owned_rows():
            for n in range(max(1, k - self.B), min(self.M, k + self.B) + 1):
                g = exact_cross_block(ops, sh.d_points[k], st["u_points"][n])
                r_blk = g - qf.q_block(wg[k], n)
                st["rbar_rows"][k][:, qf.cols(n)] = r_blk
                # recursion inputs for the forward sweep
                if k > m and n > m + self.B:
                    st["rbar_du"][(k, n)] = r_blk
        if self.want_cov:
            st["wg_u"] = qf.row_weights(ops.sigma_s(st["u_points"][m]))
            st["uu"] = {}
            for n in range(m, min(self.M, m + self.B) + 1):
                st["uu"][(m, n)] = exact_cross_block(ops, st["u_points"][m], st["u_points"][n])

    def _upper_step(self, m: int, i: int, msgs):
        """Compute the upper (B+i)-diagonal cross block of row m."""
        st = self.state[m]
        sh = self.shards[m]
        M, B = self.M, self.B
        n = m + B + i
        if i > 1:
            self._expect(msgs, m, "cross-upper", f"stack for column {n}")
            for msg in msgs:
                rows_blocks, col = msg.block[1], msg.block[2]
                at = 0
                for k in rows_blocks:
                    size = self.part.train_blocks[k - 1].size
                    blk = msg.payload[at : at + size]
                    if blk.shape != (size, len(sh.test_blocks[col - 1])):
                        raise ProtocolError(
                            f"worker {m}: bad block shape {blk.shape} for row {k}, col {col}"
                        )
                    st["rbar_du"][(k, col)] = blk
                    at += size
        stack = np.vstack(
            [st["rbar_du"][(k, n)] for k in range(m + 1, min(m + B, M) + 1)]
        )
        new = recurse_step(st["cond"].rprime, stack)
        st["rbar_du"][(m, n)] = new
        qf = st["qf"]
        if self.want_cov:
            st["uu"][(m, n)] = qf.q_block(st["wg_u"], n) + recurse_step(
                st["rpu"], stack
            )
        if m >= 2:
            relay_rows = list(range(m, m + min(B - 1, i - 1) + 1))
            payload = np.vstack([st["rbar_du"][(k, n)] for k in relay_rows])
            self.mail.send(
                "rbar-block", m, m - 1, payload, "cross-upper", i,
                ("du-stack", tuple(relay_rows), n), (payload,),
            )

    def _transpose_step(self, n: int, i: int, msgs):
        """Transpose-path recursion over train-train columns."""
        st = self.state[n]
        sh = self.shards[n]
        M, B = self.M, self.B
        q = n + B + i
        if i > 1:
            self._expect(msgs, n, "cross-transpose", f"stack for column {q}")
            for msg in msgs:
                rows_blocks, col = msg.block[1], msg.block[2]
                at = 0
                for k in rows_blocks:
                    size = self.part.train_blocks[k - 1].size
                    st["rbar_dd"][(k, col)] = msg.payload[at : at + size]
                    at += size
        stack_parts = []
        for k in range(n + 1, min(n + B, M) + 1):
            if q - k > B:
                stack_parts.append(st["rbar_dd"][(k, q)])
            else:
                # Within-band train-train residual; the shard carries the
                # coordinates of blocks up to distance 2B for exactly this.
                stack_parts.append(st["ops"].r(sh.d_points[k], sh.d_points[q]))
        stack = np.vstack(stack_parts)
        st["rbar_dd"][(n, q)] = recurse_step(st["cond"].rprime, stack)
        st.setdefault("rbar_ud", {})[(n, q)] = recurse_step(st["rpu"], stack)
        if n >= 2:
            relay_rows = list(range(n, n + min(B - 1, i - 1) + 1))
            payload = np.vstack([st["rbar_dd"][(k, q)] for k in relay_rows])
            self.mail.send(
                "rbar-block", n, n - 1, payload, "cross-transpose", i,
                ("dd-stack", tuple(relay_rows), q), (payload,),
            )

    def _deliver_lower(self, n: int):
        """Transpose the computed test-row blocks and deliver to row owners."""
        st = self.state[n]
        for (nn, q), blk in sorted(st.get("rbar_ud", {}).items()):
            payload = blk.T.copy()
            for dst in range(max(1, q - self.B), q + 1):
                self.mail.send(
                    "rbar-block", n, dst, payload, "cross-lower", 0,
                    ("du-lower", q, nn), (payload,),
                )

    def _collect_lower(self, m: int):
        st = self.state[m]
        sh = self.shards[m]
        qf = st["qf"]
        for msg in self.mail.drain(m):
            if msg.block[0] != "du-lower":
                raise ProtocolError(f"worker {m}: unexpected message {msg.block[0]}")
            q, n = msg.block[1], msg.block[2]
            expected = (self.part.train_blocks[q - 1].size, len(sh.test_blocks[n - 1]))
            if msg.payload.shape != expected:
                raise ProtocolError(
                    f"worker {m}: block ({q},{n}) has shape {msg.payload.shape}, expected {expected}"
                )
            st["rbar_du"][(q, n)] = msg.payload
        # Complete the owned residual rows: every off-band block must be
        # present by now, either computed locally or received.
        for k in sh.owned_rows():
            for n in range(1, self.M + 1):
                if abs(k - n) <= self.B:
                    continue
                if (k, n) not in st["rbar_du"]:
                    raise ProtocolError(f"worker {m}: missing residual block ({k},{n})")
                st["rbar_rows"][k][:, qf.cols(n)] = st["rbar_du"][(k, n)]

    def _local_summary(self, m: int):
        st = self.state[m]
        sh = self.shards[m]
        cond = st["cond"]
        h = self.h
        ops = st["ops"]
        band_ids = list(range(m + 1, min(m + self.B, self.M) + 1))
        y_band = (
            np.concatenate([sh.y[k] for k in band_ids])
            if band_ids
            else np.zeros(0)
        )
        ls = combined_local_summary(
            m,
            cond,
            sh.y[m] - prior_mean(sh.y[m].size, h),
            y_band - prior_mean(y_band.size, h),
            ops.sigma_s(sh.d_points[m]),
            ops.sigma_s(st["band_points"]) if cond.band_idx.size else np.zeros((0, len(sh.s_points))),
            st["wg"][m],
            [st["wg"][k] for k in band_ids],
            st["rbar_rows"][m],
            [st["rbar_rows"][k] for k in band_ids],
            st["qf"],
            [self.part.train_blocks[k - 1].size for k in band_ids],
        )
        contrib = summary_contribution(
            ls, full_uu=self.want_cov,
            u_block_sizes=[len(b) for b in self.part.test_blocks],
        )
        arrays = [contrib.y_s, contrib.y_u, contrib.ss, contrib.us]
        payload = {"contribution": contrib}
        if self.want_cov:
            payload["uu_blocks"] = {k: v for k, v in sorted(st["uu"].items())}
            arrays += list(payload["uu_blocks"].values())
        self.mail.send(
            "local-summary", m, 0, payload, "local-summary", 0, ("summary", m),
            tuple(np.atleast_2d(a) for a in arrays),
        )

    def _master_reduce(self):
        msgs = self._expect(self.mail.drain(0), 0, "global-summary", "local summaries")
        contribs = []
        uu_upper: dict = {}
        for msg in msgs:
            if msg.kind != "local-summary":
                raise ProtocolError(f"master: unexpected message kind {msg.kind}")
            contribs.append(msg.payload["contribution"])
            if self.want_cov:
                uu_upper.update(msg.payload["uu_blocks"])
        if len(contribs) != self.M:
            raise ProtocolError(f"master: got {len(contribs)} summaries, expected {self.M}")
        ops = ResidualOps.from_points(self.shards[1].s_points, self.h)
        gs = global_summary(contribs, ops.sigma_ss, full_uu=self.want_cov)
        self.master["gs"] = gs
        if self.want_cov:
            u_sizes = [len(b) for b in self.part.test_blocks]
            starts = np.concatenate([[0], np.cumsum(u_sizes)])
            sigma_uu = np.zeros((starts[-1], starts[-1]))
            for (a, b), blk in uu_upper.items():
                sigma_uu[starts[a - 1] : starts[a], starts[b - 1] : starts[b]] = blk
                if b > a:
                    sigma_uu[starts[b - 1] : starts[b], starts[a - 1] : starts[a]] = blk.T
            self.master["sigma_bar_uu"] = sigma_uu
        u_sizes = [len(b) for b in self.part.test_blocks]
        starts = np.concatenate([[0], np.cumsum(u_sizes)])
        for m in range(1, self.M + 1):
            lo, hi = starts[m - 1], starts[m]
            tup = {
                "y_ddot_s": gs.y_ddot_s,
                "y_ddot_um": gs.y_ddot_u[lo:hi],
                "sigma_ddot_ss": gs.sigma_ddot_ss,
                "sigma_ddot_ums": gs.sigma_ddot_us[lo:hi],
                "sigma_ddot_umum": gs.sigma_ddot_uu_blockdiag[m - 1],
            }
            self.mail.send(
                "global-summary", 0, m, tup, "global-scatter", 0, ("global", m),
                (gs.y_ddot_s, gs.y_ddot_u[lo:hi], gs.sigma_ddot_ss,
                 np.atleast_2d(gs.sigma_ddot_us[lo:hi]), np.atleast_2d(tup["sigma_ddot_umum"])),
            )

    def _predict_block(self, m: int):
        msgs = self._expect(self.mail.drain(m), m, "predict", "global summary tuple")
        tup = msgs[0].payload
        h = self.h
        l_gg, _ = cholesky_jittered(
            0.5 * (tup["sigma_ddot_ss"] + tup["sigma_ddot_ss"].T)
        )
        mean = (
            prior_mean(tup["y_ddot_um"].size, h)
            + tup["y_ddot_um"]
            - tup["sigma_ddot_ums"] @ chol_solve(l_gg, tup["y_ddot_s"])
        )
        w = half_solve(l_gg, tup["sigma_ddot_ums"].T)
        var = (
            np.full(mean.size, h.prior_var)
            - np.diag(tup["sigma_ddot_umum"]).copy()
            + np.einsum("ij,ij->j", w, w)
        )
        payload = {"mean": mean, "var": var}
        self.mail.send(
            "prediction", m, 0, payload, "predict", 0, ("prediction", m),
            (mean, var),
        )

    # -- driver -------------------------------------------------------------

    def _recursion_step(self, m: int, i: int):
        # The forward and transpose recursions are independent chains, so
        # one barrier step advances both for better pool utilization.
        inbox = self.mail.drain(m) if i > 1 else []
        du = [g for g in inbox if g.block[0] == "du-stack"]
        dd = [g for g in inbox if g.block[0] == "dd-stack"]
        bad = [g for g in inbox if g.block[0] not in ("du-stack", "dd-stack")]
        if bad:
            raise ProtocolError(
                f"worker {m}: unexpected message {bad[0].block[0]} during recursion"
            )
        self._upper_step(m, i, du)
        self._transpose_step(m, i, dd)

    def run_cross_phase(self):
        M, B = self.M, self.B
        self._run_phase("shard-setup", {m: (lambda mm=m: self._setup_worker(mm)) for m in range(1, M + 1)})
        steps = max(0, M - 1 - B)
        for i in range(1, steps + 1):
            active = list(range(1, M - B - i + 1))
            self._run_phase(
                "cross-recursion",
                {m: (lambda mm=m, ii=i: self._recursion_step(mm, ii)) for m in active},
                step=i,
            )
            self.stats.recursion_steps_up = max(self.stats.recursion_steps_up, i)
            self.stats.recursion_steps_transpose = max(self.stats.recursion_steps_transpose, i)
        senders = [n for n in range(1, M + 1) if self.state[n].get("rbar_ud")]
        self._run_phase("cross-lower", {n: (lambda nn=n: self._deliver_lower(nn)) for n in senders})
        self._run_phase("cross-collect", {m: (lambda mm=m: self._collect_lower(mm)) for m in range(1, M + 1)})

    def run(self, want_prediction: bool = True):
        t0 = time.perf_counter()
        with _gc_paused(), threadpool_limits(limits=1), ThreadPoolExecutor(max_workers=self.pool_size) as pool:
            self._pool = pool
            self.run_cross_phase()
            if want_prediction:
                self._run_phase(
                    "local-summary",
                    {m: (lambda mm=m: self._local_summary(mm)) for m in range(1, self.M + 1)},
                )
                self._run_phase("global-summary", {0: self._master_reduce})
                self._run_phase(
                    "predict", {m: (lambda mm=m: self._predict_block(mm)) for m in range(1, self.M + 1)}
                )
        self._pool = None
        self.stats.wall_time_s = time.perf_counter() - t0
        self._finalize_stats()

    def _finalize_stats(self):
        self.stats.message_count = len(self.mail.log)
        self.stats.message_bytes = sum(m.nbytes for m in self.mail.log)
        kinds: dict = {}
        for m in self.mail.log:
            kinds[m.kind] = kinds.get(m.kind, 0) + 1
        self.stats.kind_counts = kinds
        self.stats.trace = [
            (m.seq, m.kind, m.src, m.dst, m.rows, m.cols, m.phase, m.step, m.block)
            for m in sorted(self.mail.log, key=lambda x: (x.phase, x.step, x.src, x.dst))
        ]

    def gather_prediction(self) -> Prediction:
        msgs = self._expect(self.mail.drain(0), 0, "gather", "block predictions")
        by_block = {}
        for msg in msgs:
            if msg.kind != "prediction":
                raise ProtocolError(f"master: unexpected kind {msg.kind} while gathering")
            by_block[msg.block[1]] = msg.payload
        mean_perm = np.concatenate([by_block[m]["mean"] for m in range(1, self.M + 1)])
        var_perm = np.concatenate([by_block[m]["var"] for m in range(1, self.M + 1)])
        cov_perm = None
        if self.want_cov:
            gs: GlobalSummary = self.master["gs"]
            l_gg, _ = cholesky_jittered(0.5 * (gs.sigma_ddot_ss + gs.sigma_ddot_ss.T))
            w = half_solve(l_gg, gs.sigma_ddot_us.T)
            cov_perm = self.master["sigma_bar_uu"] - gs.sigma_ddot_uu + w.T @ w
        u_perm = self.part.test_perm()
        inv = np.empty(u_perm.size, dtype=np.int64)
        inv[u_perm] = np.arange(u_perm.size)
        return Prediction(
            mean_perm[inv],
            var_perm[inv],
            cov_perm[np.ix_(inv, inv)] if cov_perm is not None else None,
        )


def compute_rbar_cross_parallel(
    train: Dataset,
    test,
    h: Hyperparams,
    config: LmaConfig,
    workers: int = 1,
) -> dict:
    """Run only the cross-block phases; returns per-worker prior cross rows.

    ``{m: (sigma_bar over (D_m, U), sigma_bar over (band_m, U))}`` with
    test columns in block order, equal to the centralized assembly.
    """
    eng = _Engine(train, test, h, config, workers, want_cov=False)
    with _gc_paused(), threadpool_limits(limits=1), ThreadPoolExecutor(max_workers=eng.pool_size) as pool:
        eng._pool = pool
        eng.run_cross_phase()
    eng._pool = None
    eng._finalize_stats()
    out = {}
    n_u = len(eng.tp)
    for m in range(1, eng.M + 1):
        st = eng.state[m]
        qf = st["qf"]
        rows = {}
        for k in eng.shards[m].owned_rows():
            row = st["wg"][k] @ qf.su + st["rbar_rows"][k]
            # within the band the prior is the exact covariance
            for n in range(max(1, k - eng.B), min(eng.M, k + eng.B) + 1):
                row[:, qf.cols(n)] = exact_cross_block(
                    st["ops"], eng.shards[m].d_points[k], st["u_points"][n]
                )
            rows[k] = row
        band = [rows[k] for k in range(m + 1, min(m + eng.B, eng.M) + 1)]
        out[m] = (
            rows[m],
            np.vstack(band) if band else np.zeros((0, n_u)),
        )
    return out


def run_parallel_lma(
    train: Dataset,
    test,
    h: Hyperparams,
    config: LmaConfig,
    workers: int,
    want_cov: bool = False,
):
    """Distributed summary predictor.

    ``workers`` is the physical thread count; there is always one
    logical worker per block, multiplexed onto the pool.  Returns
    ``(Prediction, RunStats)``; the prediction equals the centralized
    summary predictor.
    """
    eng = _Engine(train, test, h, config, workers, want_cov)
    eng.run()
    pred = eng.gather_prediction()
    return pred, eng.stats


def speedup_report(sizes, config: LmaConfig, h: Hyperparams, workers: int, d: int = 2,
                   n_test: int = 200, data_seed: int = 0):
    """Centralized vs parallel wall times on synthetic data of given sizes.

    Both arms run under single-threaded BLAS so the comparison isolates
    the block-level parallelism.  Rows: {n, t_centralized_s,
    t_parallel_s, speedup}.  Predictions must agree; that is the only
    correctness check here.
    """
    from .synth import sample_gp_dataset

    rows = []
    for n in sizes:
        train, test = sample_gp_dataset(n, n_test, d, h, seed=data_seed)
        with threadpool_limits(limits=1):
            t0 = time.perf_counter()
            pred_c = lma_predict_summary(train, test.X, h, config)
            t_c = time.perf_counter() - t0
        t0 = time.perf_counter()
        pred_p, _ = run_parallel_lma(train, test.X, h, config, workers)
        t_p = time.perf_counter() - t0
        err = float(np.max(np.abs(pred_c.mean - pred_p.mean))) if len(pred_c) else 0.0
        if err > 1e-8:
            raise ProtocolError(f"parallel/centralized mismatch {err:.3e} at n={n}")
        rows.append(
            {"n": int(n), "t_centralized_s": t_c, "t_parallel_s": t_p, "speedup": t_c / t_p}
        )
    return rows
