"""
Self-check suite: finite-difference gradients and structural invariants.

Every check returns a :class:`CheckResult`; :func:`run_checks` runs the
whole list. The same toy model used here backs the acceptance tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from tamcl import autodiff as ad
from tamcl.autodiff import Tensor
from tamcl.embedding import compress_dual
from tamcl.encoder import attention
from tamcl.evaluation import forgetting_rate
from tamcl.gradcheck import check_gradients
from tamcl.model import ModelConfig, TAMCLModel
from tamcl.task_attention import TokenRegistry, classify, init_tab, init_task_token, task_attend
from tamcl.trainer import compose_loss, compute_div, compute_ikd, loss_lambda


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# toy model with a full composed loss
# ---------------------------------------------------------------------------

TOY_CONFIG = dict(image_size=(2, 4), channels=1, patch=2, vocab_size=5, max_text_len=3,
                  hidden=16, depth=2, heads=2, mlp_dim=16, n_frozen=0)


@dataclass
class ToyProblem:
    model: TAMCLModel
    teacher: TAMCLModel
    loss_fn: Callable[[], Tensor]
    params: dict[str, Tensor]
    lam: float
    alpha: float
    beta: float


def toy_problem(seed: int = 0, alpha: float = 5000.0, div_mode: str = "repel",
                n_frozen: int = 0, jitter: float = 0.01) -> ToyProblem:
    """Two-task toy model (2 image patches, 3 text tokens) with teacher, KD and diversity terms.

    Parameters are jittered after the snapshot so the student differs from
    its teacher and the distillation term is non-trivial; ``jitter`` keeps
    ``alpha * L_ikd`` near the size of ``L_c`` (as in training) so that
    finite differences are not swamped by round-off. The loss weights
    are fixed at their values at the starting point, as in training, where
    they are constants with respect to the gradient.
    """
    rng = np.random.default_rng(seed)
    model = TAMCLModel(ModelConfig(**{**TOY_CONFIG, "n_frozen": n_frozen}), seed=seed)
    model.add_task(1, 2)
    teacher = model.snapshot()
    model.add_task(2, 3)
    model.set_current_task(2)
    for p in model.named_parameters().values():
        p.data = p.data + jitter * rng.standard_normal(p.shape)
    images = rng.uniform(0.0, 1.0, size=(2, 1, 2, 4, 1))
    tokens = rng.integers(0, 5, size=(2, 3))
    labels = np.array([0, 2])
    with ad.no_grad():
        teacher_sd = teacher.features(images, tokens)
    n_tasks = len(model.tasks)

    def terms():
        out = model.forward(images, tokens, 2)
        return (ad.cross_entropy(out.logits, labels), compute_ikd(out.s_d, teacher_sd),
                compute_div(model.tokens, 2, div_mode))

    with ad.no_grad():
        _, weights = compose_loss(*terms(), n_tasks, alpha, div_mode)
    lam, beta = weights.lam, weights.beta

    def loss_fn() -> Tensor:
        l_c, l_ikd, l_div = terms()
        return (1.0 - lam) * l_c + (lam * alpha) * l_ikd + beta * l_div

    return ToyProblem(model, teacher, loss_fn, model.trainable_parameters(), lam, alpha, beta)


def check_toy_gradients(seed: int = 0, eps: float = 1e-5, tol: float = 1e-3,
                        floor: float = 1e-6) -> tuple[dict[str, float], float]:
    """Max relative error per trainable toy-model parameter; also returns the worst."""
    prob = toy_problem(seed)
    names = list(prob.params)
    errs = check_gradients(prob.loss_fn, [prob.params[n] for n in names], eps=eps, floor=floor)
    per_param = {names[i]: e for i, e in errs.items()}
    return per_param, max(per_param.values())


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def loop_task_attention(s_d: np.ndarray, tau: np.ndarray, tab) -> tuple[np.ndarray, np.ndarray]:
    """Single-head task attention written with explicit loops over positions."""
    n, g = s_d.shape
    rows = [tau] + [s_d[i] for i in range(n)]

    def ln(v, gamma, beta, eps=1e-5):
        mu = sum(v) / g
        var = sum((x - mu) ** 2 for x in v) / g
        return np.array([(v[k] - mu) / np.sqrt(var + eps) * gamma[k] + beta[k] for k in range(g)])

    normed = [ln(r, tab.ln1_g.data, tab.ln1_b.data) for r in rows]
    wq, wk, wv = tab.wq.data, tab.wk.data, tab.wv.data
    q = np.array([sum(normed[0][a] * wq[a, c] for a in range(g)) for c in range(g)])
    keys = [np.array([sum(r[a] * wk[a, c] for a in range(g)) for c in range(g)]) for r in normed]
    vals = [np.array([sum(r[a] * wv[a, c] for a in range(g)) for c in range(g)]) for r in normed]
    scale = np.sqrt(g / 1)
    logits = [sum(q[c] * k[c] for c in range(g)) / scale for k in keys]
    m = max(logits)
    ex = [np.exp(v - m) for v in logits]
    z = sum(ex)
    w = [e / z for e in ex]
    att = sum(w[i] * vals[i] for i in range(len(vals)))
    o = np.array([sum(att[a] * tab.wo.data[a, c] for a in range(g)) + tab.bo.data[c] for c in range(g)])
    h = ln(o, tab.ln2_g.data, tab.ln2_b.data)
    w1, b1, w2, b2 = tab.w1.data, tab.b1.data, tab.w2.data, tab.b2.data
    hid = [sum(h[a] * w1[a, c] for a in range(g)) + b1[c] for c in range(w1.shape[1])]
    k0 = np.sqrt(2.0 / np.pi)
    act = [0.5 * x * (1.0 + np.tanh(k0 * (x + 0.044715 * x ** 3))) for x in hid]
    mlp = np.array([sum(act[a] * w2[a, c] for a in range(len(act))) + b2[c] for c in range(g)])
    return (mlp + o)[None, :], np.array(w)


def composed_loss_oracle(l_c: float, l_ikd: float, l_div: float, n_tasks: int, alpha: float) -> float:
    lam = (n_tasks - 1) / n_tasks
    core = (1 - lam) * l_c + lam * alpha * l_ikd
    beta = min(l_div, 0.1 * core)
    return core + beta * l_div


# ---------------------------------------------------------------------------
# individual checks
# ---------------------------------------------------------------------------

def _op_gradients() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    cases = {
        "matmul": (lambda a, b: ad.tsum(ad.matmul(a, b) * ad.matmul(a, b)), [(3, 4), (4, 2)]),
        "softmax": (lambda a, w: ad.tsum(ad.softmax(a) * w), [(2, 5), (2, 5)]),
        "layer_norm": (lambda x, g, b: ad.tsum(ad.layer_norm(x, g, b) * ad.layer_norm(x, g, b) * g),
                       [(3, 6), (6,), (6,)]),
        "gelu": (lambda a: ad.tsum(ad.gelu(a)), [(4, 3)]),
        "log_softmax": (lambda a, w: ad.tsum(ad.log_softmax(a) * w), [(2, 4), (2, 4)]),
        "kl": (lambda s: ad.kl_divergence(s, np.array([[0.3, -1.0, 2.0]]), 2.0), [(1, 3)]),
        "cross_entropy": (lambda a: ad.cross_entropy(a, np.array([1, 0, 4])), [(3, 5)]),
        "attention": (lambda q, k, v: ad.tsum(attention(q, k, v, 2) * attention(q, k, v, 2)),
                      [(1, 3, 4), (1, 3, 4), (1, 3, 4)]),
        "compress_dual": (lambda v: ad.tsum(compress_dual(v) * compress_dual(v)), [(1, 8)]),
    }
    worst = {}
    for name, (fn, shapes) in cases.items():
        ts = [Tensor(rng.standard_normal(s), requires_grad=True) for s in shapes]
        errs = check_gradients(lambda: fn(*ts), ts, eps=1e-5, floor=1e-6)
        worst[name] = max(errs.values())
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    return not bad, ", ".join(f"{k}={v:.1e}" for k, v in worst.items())


def _model_gradients() -> tuple[bool, str]:
    per, worst = check_toy_gradients()
    return worst < 1e-3, f"{len(per)} parameters, max relative error {worst:.2e}"


def _softmax_rows() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    x = rng.standard_normal((50, 7)) * 30
    s = ad.softmax(Tensor(x)).data.sum(axis=-1)
    err = float(np.max(np.abs(s - 1)))
    return err <= 1e-9, f"max |row sum - 1| = {err:.1e}"


def _task_attention_oracle() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    g = 8
    reg = TokenRegistry()
    token = init_task_token(1, g, rng, reg)
    tab = init_tab(rng, g, 1, 12)
    worst, shapes = 0.0, []
    for n in (1, 9, 33):
        s = rng.standard_normal((n, g))
        out, w = task_attend(Tensor(s), token, tab, return_weights=True)
        ref, ref_w = loop_task_attention(s, token.tau.data, tab)
        shapes.append(out.shape)
        worst = max(worst, float(np.max(np.abs(out.data - ref))), float(np.max(np.abs(w.data.reshape(-1) - ref_w))))
    ok = worst <= 1e-10 and all(sh == (1, g) for sh in shapes)
    return ok, f"shapes {shapes}, max deviation from loop oracle {worst:.1e}"


def _composed_loss() -> tuple[bool, str]:
    total, w = compose_loss(Tensor(1.0), Tensor(0.0001), Tensor(10.0), 2, 5000.0, div_mode="literal")
    ref = composed_loss_oracle(1.0, 0.0001, 10.0, 2, 5000.0)
    ok = abs(float(total.data) - ref) < 1e-12 and w.lam == 0.5 and abs(w.beta - 0.075) < 1e-15
    return ok, f"loss {float(total.data)!r} (oracle {ref!r}), lambda {w.lam}, beta {w.beta!r}"


def _lambda_schedule() -> tuple[bool, str]:
    got = [loss_lambda(t) for t in range(1, 6)]
    ok = got == [0.0, 0.5, 2 / 3, 0.75, 0.8]
    return ok, "lambda(1..5) = " + ", ".join(f"{v:.4f}" for v in got)


def _forgetting_oracle() -> tuple[bool, str]:
    v = forgetting_rate(76.09, 66.09, 430)
    return abs(100 * v - 13.15) <= 0.05, f"T_F = {100 * v:.4f}%"


def _head_expansion() -> tuple[bool, str]:
    model = TAMCLModel(ModelConfig(**TOY_CONFIG), seed=3)
    rng = np.random.default_rng(3)
    images = rng.uniform(size=(4, 1, 2, 4, 1))
    tokens = rng.integers(0, 5, size=(4, 3))
    widths, preserved = [], True
    for tid, n in ((1, 2), (2, 3), (3, 4)):
        before = None
        if model.tasks:
            prev = model.task_ids[-1]
            with ad.no_grad():
                s = model.pooled(images, tokens, prev)[0]
                before = classify(s, model.heads[prev]).data
        model.add_task(tid, n)
        head = model.heads[tid]
        widths.append(head.width)
        if before is not None:
            with ad.no_grad():
                after = classify(s, head).data[..., :before.shape[-1]]
            preserved &= np.array_equal(before, after)
    return widths == [2, 5, 9] and preserved, f"widths {widths}, previous logits bit-equal: {preserved}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "op-gradients": _op_gradients,
    "softmax-rows": _softmax_rows,
    "task-attention-oracle": _task_attention_oracle,
    "head-expansion": _head_expansion,
    "composed-loss": _composed_loss,
    "lambda-schedule": _lambda_schedule,
    "forgetting-oracle": _forgetting_oracle,
    "model-gradients": _model_gradients,
}


def run_checks(names: Optional[list[str]] = None,
               on_result: Optional[Callable[[CheckResult], None]] = None) -> list[CheckResult]:
    names = list(CHECKS) if not names else names
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown check(s) {unknown}; available: {list(CHECKS)}")
    results = []
    for name in names:
        t0 = time.perf_counter()
        try:
            ok, detail = CHECKS[name]()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        res = CheckResult(name, bool(ok), detail, time.perf_counter() - t0)
        results.append(res)
        if on_result:
            on_result(res)
    return results
