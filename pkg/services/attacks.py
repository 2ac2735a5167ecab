"""
敵対例の生成（L∞ 球）

FGSM / PGD / TRADES の内側最大化 / InfoPGD / CW マージン PGD / SPSA / 最小摂動探索
勾配型の攻撃はすべて pgd_maximize（符号勾配の上昇 + 射影）を共有する

【射影の順序】
ε球への射影 → [0,1] へのクリップ（L∞ では両者を合わせて冪等）
"""

import logging
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from core.errors import NonFiniteError, ShapeError
from core.tensor import Tensor, as_tensor, backward
from models.config import AttackConfig, AttackKind, Divergence, LossKind
from models.results import AdvResult
from services.classifier import Classifier
from services import losses

logger = logging.getLogger(__name__)

Objective = Callable[[Tensor], Tensor]
StartFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]
Radius = Union[float, np.ndarray]


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"攻撃の入力は (batch, d) である必要があります: {x.shape}")
    return x


def _rng(cfg: AttackConfig, rng: Optional[np.random.Generator]) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(cfg.seed)


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: Radius) -> np.ndarray:
    """ε球 {‖x' - x‖∞ ≤ ε} と [0,1] の箱の共通部分へ射影する"""
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), 0.0, 1.0)


def _value_and_grad(objective: Objective, x_adv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    leaf = Tensor(x_adv, requires_grad=True)
    per_example = objective(leaf)
    if per_example.shape != (x_adv.shape[0],):
        raise ShapeError(f"攻撃の目的関数は事例ごとの値 (batch,) を返す必要があります: {per_example.shape}")
    total = per_example.sum()
    if total.tracked:
        backward(total)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(x_adv)
    if not np.isfinite(grad).all():
        raise NonFiniteError("攻撃の勾配に非有限値が含まれています")
    return per_example.data.copy(), grad


def _uniform_start(x: np.ndarray, rng: np.random.Generator, epsilon: Radius) -> np.ndarray:
    noise = rng.uniform(-1.0, 1.0, size=x.shape) * epsilon
    return project(x + noise, x, epsilon)


def pgd_maximize(objective: Objective, x, cfg: AttackConfig,
                 rng: Optional[np.random.Generator] = None,
                 start: Optional[StartFn] = None,
                 epsilon: Optional[Radius] = None,
                 alpha: Optional[Radius] = None) -> AdvResult:
    """
    事例ごとの目的関数を符号勾配の上昇で最大化する

    各ステップ: x' ← Π(x' + α·sign(∇ Σ objective))
    返すのは損失最大の反復点（ランダム初期化時のみ初期点も候補）
    restarts > 1 の場合は事例ごとに損失が最大のリスタートを採用する

    Args:
        objective: Tensor (batch, d) → Tensor (batch,)
        start: 初期点の生成関数（None で cfg.random_start に従う一様初期化）
        epsilon, alpha: 事例ごとの半径・ステップ幅を配列 (batch, 1) で与える場合に指定

    Raises:
        NonFiniteError: いずれかのステップで勾配が非有限
    """
    x = _as_batch(x)
    rng = _rng(cfg, rng)
    eps = cfg.epsilon if epsilon is None else epsilon
    step = cfg.alpha if alpha is None else alpha
    n = x.shape[0]

    best_x = x.copy()
    best_loss = np.full(n, -np.inf)
    trajectory: List[float] = []

    for restart in range(cfg.restarts):
        if start is not None:
            current = project(start(x, rng), x, eps)
        elif cfg.random_start:
            current = _uniform_start(x, rng, eps)
        else:
            current = x.copy()
        randomized = start is not None or cfg.random_start

        run_x = current.copy()
        run_loss = np.full(n, -np.inf)
        for t in range(cfg.steps):
            loss, grad = _value_and_grad(objective, current)
            if t > 0 or randomized:
                improved = loss > run_loss
                run_x[improved] = current[improved]
                run_loss[improved] = loss[improved]
            trajectory.append(float(loss.mean()) if n else 0.0)
            current = project(current + step * np.sign(grad), x, eps)

        final = objective(as_tensor(current)).data
        if not np.isfinite(final).all():
            raise NonFiniteError("攻撃の損失に非有限値が含まれています")
        improved = final > run_loss
        run_x[improved] = current[improved]
        run_loss[improved] = final[improved]
        trajectory.append(float(final.mean()) if n else 0.0)

        better = run_loss > best_loss
        best_x[better] = run_x[better]
        best_loss[better] = run_loss[better]
        logger.debug(f"PGD リスタート {restart + 1}/{cfg.restarts}: 平均損失 {trajectory[-1]:.6f}")

    return AdvResult(
        x_adv=best_x,
        success_mask=np.zeros(n, dtype=bool),
        loss_trajectory=trajectory,
        final_loss=best_loss
    )


def _finish(c: Classifier, result: AdvResult, reference: np.ndarray) -> AdvResult:
    result.success_mask = c.predict(result.x_adv) != reference
    return result


def _ce_objective(c: Classifier, y: np.ndarray) -> Objective:
    return lambda xa: losses.cross_entropy_per_example(c.probs(xa), y)


def _margin_objective(c: Classifier, y: np.ndarray) -> Objective:
    return lambda xa: losses.margin_loss(c.logits(xa), y)


# ========================================
# 勾配型の攻撃
# ========================================

def fgsm(c: Classifier, x, y, cfg: AttackConfig) -> AdvResult:
    """
    1ステップ攻撃 x' = clip(x + ε·sign(∇ CE))
    """
    x = _as_batch(x)
    y = np.asarray(y, dtype=np.int64)
    with c.frozen():
        loss, grad = _value_and_grad(_ce_objective(c, y), x)
        x_adv = project(x + cfg.epsilon * np.sign(grad), x, cfg.epsilon)
        final = _ce_objective(c, y)(as_tensor(x_adv)).data
        result = AdvResult(x_adv=x_adv, success_mask=np.zeros(len(y), dtype=bool),
                           loss_trajectory=[float(loss.mean()) if len(y) else 0.0, float(final.mean()) if len(y) else 0.0],
                           final_loss=final)
        return _finish(c, result, y)


def pgd(c: Classifier, x, y, cfg: AttackConfig, rng: Optional[np.random.Generator] = None) -> AdvResult:
    """CE を最大化する PGD（best iterate、リスタート対応）"""
    y = np.asarray(y, dtype=np.int64)
    with c.frozen():
        result = pgd_maximize(_ce_objective(c, y), x, cfg, rng)
        return _finish(c, result, y)


def cw_pgd(c: Classifier, x, y, cfg: AttackConfig, rng: Optional[np.random.Generator] = None) -> AdvResult:
    """ロジットのマージン max_{k≠y} z_k - z_y を最大化する PGD"""
    y = np.asarray(y, dtype=np.int64)
    with c.frozen():
        result = pgd_maximize(_margin_objective(c, y), x, cfg, rng)
        return _finish(c, result, y)


def trades_inner(c: Classifier, x, cfg: AttackConfig, rng: Optional[np.random.Generator] = None) -> AdvResult:
    """
    KL(p(x)‖p(x')) を最大化する（p(x) は固定）
    ランダム初期化は x + 0.001·N(0,1)
    成功判定は自然例の予測との不一致
    """
    x = _as_batch(x)
    with c.frozen():
        p_nat = as_tensor(c.probs(x).data)
        objective = lambda xa: losses.kl_divergence(p_nat, c.probs(xa))
        start = (lambda base, gen: base + 0.001 * gen.standard_normal(base.shape)) if cfg.random_start else None
        result = pgd_maximize(objective, x, cfg, rng, start=start)
        return _finish(c, result, c.predict(x))


def info_pgd(c: Classifier, x, y, cfg: AttackConfig, rng: Optional[np.random.Generator] = None,
             weights: Optional[np.ndarray] = None, divergence: Divergence = Divergence.MSE) -> AdvResult:
    """
    InfoPGD: CE(p(x'), y) + λ·w(x)·D(p(x), p(x')) を最大化する

    w(x) は既定で H(p(x))。ループ前に1回だけ計算し、p(x) とともに定数として扱う
    λ = 0 のとき pgd と同一の軌跡になる
    """
    x = _as_batch(x)
    y = np.asarray(y, dtype=np.int64)
    with c.frozen():
        probs = c.probs(x)
        p_nat = as_tensor(probs.data)
        if weights is None:
            weights = losses.entropy(p_nat).data.copy()
        weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), (x.shape[0],)).copy()
        w = as_tensor(weights)
        lam = cfg.lam

        def objective(xa: Tensor) -> Tensor:
            p_adv = c.probs(xa)
            loss = losses.cross_entropy_per_example(p_adv, y)
            if lam == 0:
                return loss
            return loss + losses.divergence(divergence, p_nat, p_adv) * w * lam

        result = pgd_maximize(objective, x, cfg, rng)
        result.weights = weights
        return _finish(c, result, y)


# ========================================
# 勾配を使わない攻撃
# ========================================

def spsa_gradient(loss_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, spsa_batch: int,
                  delta: float, rng: np.random.Generator, chunk: int = 16) -> np.ndarray:
    """
    SPSA による勾配推定（順伝播のみ）

    ラデマッハ方向 v について (L(x + δv) - L(x - δv)) / 2δ · v を spsa_batch // 2 組で平均する

    Args:
        loss_fn: (n, d) → (n,) の損失
    """
    x = _as_batch(x)
    n, d = x.shape
    pairs = max(1, spsa_batch // 2)
    estimate = np.zeros_like(x)
    done = 0
    while done < pairs:
        count = min(chunk, pairs - done)
        v = rng.choice([-1.0, 1.0], size=(count, n, d))
        probes = np.concatenate([(x + delta * v).reshape(-1, d), (x - delta * v).reshape(-1, d)])
        values = np.asarray(loss_fn(probes), dtype=np.float64)
        if not np.isfinite(values).all():
            raise NonFiniteError("SPSA: 損失に非有限値が含まれています")
        plus, minus = values[:count * n].reshape(count, n), values[count * n:].reshape(count, n)
        estimate += (((plus - minus) / (2.0 * delta))[:, :, None] * v).sum(axis=0)
        done += count
    return estimate / pairs


def spsa(c: Classifier, x, y, cfg: AttackConfig, rng: Optional[np.random.Generator] = None) -> AdvResult:
    """
    SPSA 攻撃（ブラックボックス）

    マージン損失の推定勾配で符号上昇し、誤分類した事例はその反復で打ち切る
    反復回数は cfg.steps、学習率・δ・バッチは cfg.spsa_* に従う
    """
    x = _as_batch(x)
    y = np.asarray(y, dtype=np.int64)
    rng = _rng(cfg, rng)
    x_adv = x.copy()
    trajectory: List[float] = []

    with c.frozen():
        def margins(inputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
            return losses.margin_loss(c.logits(inputs), labels).data

        active = c.predict(x) == y
        for iteration in range(cfg.steps):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            xs, ys = x_adv[idx], y[idx]
            tiled = lambda probes: margins(probes, np.tile(ys, len(probes) // len(ys)))
            grad = spsa_gradient(tiled, xs, cfg.spsa_batch, cfg.spsa_delta, rng)
            x_adv[idx] = project(xs + cfg.spsa_lr * np.sign(grad), x[idx], cfg.epsilon)
            fooled = c.predict(x_adv[idx]) != ys
            active[idx[fooled]] = False
            trajectory.append(float(margins(x_adv, y).mean()))
            logger.debug(f"SPSA 反復 {iteration + 1}: 残り {int(active.sum())} 件")

        final = margins(x_adv, y) if len(y) else np.zeros(0)
    result = AdvResult(x_adv=x_adv, success_mask=np.zeros(len(y), dtype=bool),
                       loss_trajectory=trajectory, final_loss=final)
    return _finish(c, result, y)


# ========================================
# 攻撃の振り分けと最小摂動探索
# ========================================

def run_attack(kind: AttackKind, c: Classifier, x, y, cfg: AttackConfig,
               rng: Optional[np.random.Generator] = None) -> AdvResult:
    """
    攻撃の種類で振り分ける
    PGD は cfg.loss_kind で最大化する損失を選ぶ（ce / cw_margin / kl_trades / info）
    """
    if kind is AttackKind.FGSM:
        return fgsm(c, x, y, cfg)
    if kind is AttackKind.PGD:
        if cfg.loss_kind is LossKind.CW_MARGIN:
            return cw_pgd(c, x, y, cfg, rng)
        if cfg.loss_kind is LossKind.KL_TRADES:
            return trades_inner(c, x, cfg, rng)
        if cfg.loss_kind is LossKind.INFO:
            return info_pgd(c, x, y, cfg, rng)
        return pgd(c, x, y, cfg, rng)
    if kind is AttackKind.CW_PGD:
        return cw_pgd(c, x, y, cfg, rng)
    if kind is AttackKind.INFO_PGD:
        return info_pgd(c, x, y, cfg, rng)
    if kind is AttackKind.SPSA:
        return spsa(c, x, y, cfg, rng)
    raise ValueError(f"未対応の攻撃です: {kind}")


def min_perturbation(c: Classifier, x, y, eps_max: float, tol: float = 1e-3,
                     steps: int = 20, restarts: int = 3, seed: int = 0) -> List[Optional[float]]:
    """
    攻撃が成功する最小の半径 ε を二分探索で求める（事例ごと）

    - クリーン入力で誤分類済み → 0.0
    - eps_max でも攻撃できない → None（番兵）
    成功判定は PGD（steps 回、α = ε/4、restarts 回）。成功は ε について単調とみなす
    """
    x = _as_batch(x)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    oracle = AttackConfig(epsilon=eps_max, steps=steps, random_start=True, restarts=restarts, seed=seed)

    def succeeds(radius: np.ndarray, idx: np.ndarray) -> np.ndarray:
        r = radius[:, None]
        sub_objective = lambda xa: losses.cross_entropy_per_example(c.probs(xa), y[idx])
        result = pgd_maximize(sub_objective, x[idx], oracle, rng, epsilon=r, alpha=r / 4)
        return c.predict(result.x_adv) != y[idx]

    radii: List[Optional[float]] = [None] * n
    with c.frozen():
        correct = c.predict(x) == y
        for i in np.flatnonzero(~correct):
            radii[i] = 0.0
        idx = np.flatnonzero(correct)
        if idx.size == 0:
            return radii

        reachable = succeeds(np.full(idx.size, float(eps_max)), idx)
        idx = idx[reachable]
        lo = np.zeros(idx.size)
        hi = np.full(idx.size, float(eps_max))
        while idx.size and np.max(hi - lo) > tol:
            mid = (lo + hi) / 2.0
            hit = succeeds(mid, idx)
            hi = np.where(hit, mid, hi)
            lo = np.where(hit, lo, mid)
        for i, radius in zip(idx, hi):
            radii[i] = float(radius)
    logger.debug(f"最小摂動探索: {sum(r is None for r in radii)} / {n} 件が eps_max まで頑健")
    return radii
