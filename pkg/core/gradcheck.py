"""
勾配チェック
解析的勾配を64bit中心差分と比較する検証ハーネス
"""
from typing import Callable, Dict, Union

import numpy as np

from core import layers
from core.tensor import Tensor
from utils.logger import logger

FD_EPSILON = 1e-4
# |a − n| / max(|a| + |n|, floor)：勾配がほぼ0の座標で丸め誤差を増幅しないための下限
RELATIVE_FLOOR = 1e-3


def relative_error(analytic: float, numeric: float, floor: float = RELATIVE_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)


def grad_check(
    forward: Callable[[np.ndarray], np.ndarray],
    backward: Callable[[np.ndarray], np.ndarray],
    x: Union[Tensor, np.ndarray],
    probe_count: int = 32,
    seed: int = 0,
    epsilon: float = FD_EPSILON
) -> float:
    """
    解析的勾配と中心差分の最大相対誤差

    スカラー L(x) = Σ forward(x)·g（g は乱数の上流勾配）について、
    backward(g) の probe_count 座標を (L(x+εe) − L(x−εe)) / 2ε と比較する。
    計算はすべて64bit。

    Args:
        forward: x → 出力
        backward: 上流勾配 → x の勾配（直前の forward(x) の状態を使ってよい）
        x: 評価点（Tensorの場合は grad に解析的勾配を書き込む）
        probe_count: 比較する座標数
        seed: 座標・上流勾配の乱数シード
        epsilon: 差分幅

    Returns:
        最大相対誤差
    """
    rng = np.random.default_rng(seed)
    values = x.values if isinstance(x, Tensor) else np.asarray(x)
    point = values.astype(np.float64).copy()

    out = forward(point)
    upstream = rng.standard_normal(np.shape(out))
    analytic = np.asarray(backward(upstream), dtype=np.float64)
    if isinstance(x, Tensor):
        x.grad = analytic.astype(values.dtype)

    def objective(p: np.ndarray) -> float:
        return float(np.sum(forward(p) * upstream))

    flat_size = point.size
    probes = rng.choice(flat_size, size=min(probe_count, flat_size), replace=False)
    worst = 0.0
    for index in probes:
        coord = np.unravel_index(index, point.shape)
        original = point[coord]
        point[coord] = original + epsilon
        plus = objective(point)
        point[coord] = original - epsilon
        minus = objective(point)
        point[coord] = original
        numeric = (plus - minus) / (2.0 * epsilon)
        worst = max(worst, relative_error(float(analytic[coord]), numeric))
    return worst


def _conv_suite(rng: np.random.Generator, probe_count: int) -> Dict[str, float]:
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    state = {}

    def fwd_x(p):
        out, state["cache"] = layers.conv2d_forward(p, w, b, 1, 1)
        return out

    def fwd_w(p):
        out, state["cache"] = layers.conv2d_forward(x, p, b, 1, 1)
        return out

    def fwd_b(p):
        out, state["cache"] = layers.conv2d_forward(x, w, p, 1, 1)
        return out

    def fwd_strided(p):
        out, state["cache"] = layers.conv2d_forward(p, w, b, 2, 1)
        return out

    return {
        "conv2d.input": grad_check(fwd_x, lambda g: layers.conv2d_backward(g, state["cache"])[0], x, probe_count),
        "conv2d.weight": grad_check(fwd_w, lambda g: layers.conv2d_backward(g, state["cache"])[1], w, probe_count),
        "conv2d.bias": grad_check(fwd_b, lambda g: layers.conv2d_backward(g, state["cache"])[2], b, probe_count),
        "conv2d.stride2": grad_check(
            fwd_strided, lambda g: layers.conv2d_backward(g, state["cache"])[0], x, probe_count
        ),
    }


def _group_norm_suite(rng: np.random.Generator, probe_count: int) -> Dict[str, float]:
    x = rng.standard_normal((2, 4, 8, 8))
    gain = rng.standard_normal(4)
    shift = rng.standard_normal(4)
    state = {}

    def fwd_x(p):
        out, state["cache"] = layers.group_norm_forward(p, 2, gain, shift)
        return out

    def fwd_gain(p):
        out, state["cache"] = layers.group_norm_forward(x, 2, p, shift)
        return out

    return {
        "group_norm.input": grad_check(
            fwd_x, lambda g: layers.group_norm_backward(g, state["cache"])[0], x, probe_count
        ),
        "group_norm.gain": grad_check(
            fwd_gain, lambda g: layers.group_norm_backward(g, state["cache"])[1], gain, probe_count
        ),
    }


def _linear_suite(rng: np.random.Generator, probe_count: int) -> Dict[str, float]:
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((5, 6))
    b = rng.standard_normal(5)
    return {
        "linear.input": grad_check(
            lambda p: layers.linear(p, w, b), lambda g: layers.linear_backward(g, x, w)[0], x, probe_count
        ),
        "linear.weight": grad_check(
            lambda p: layers.linear(x, p, b), lambda g: layers.linear_backward(g, x, w)[1], w, probe_count
        ),
    }


def _elementwise_suite(rng: np.random.Generator, probe_count: int) -> Dict[str, float]:
    x = rng.standard_normal((2, 3, 8, 8))
    # ReLUは0付近で微分不可能なので差分幅より離しておく
    x_relu = np.where(np.abs(x) < 1e-2, 0.5, x)
    return {
        "silu": grad_check(layers.silu, lambda g: layers.silu_backward(g, x), x, probe_count),
        "relu": grad_check(layers.relu, lambda g: layers.relu_backward(g, x_relu), x_relu, probe_count),
        "bilinear_resize": grad_check(
            lambda p: layers.bilinear_resize(p, 5, 11),
            lambda g: layers.bilinear_resize_backward(g, 8, 8),
            x, probe_count,
        ),
        "upsample_nearest2x": grad_check(
            layers.upsample_nearest2x, layers.upsample_nearest2x_backward, x, probe_count
        ),
    }


def unet_gradient_check(seed: int = 0, probe_count: int = 16, size: int = 16) -> Dict[str, float]:
    """
    小さなU-Net全体の勾配チェック（パラメータを64bitに変換して実行）

    出力convはゼロ初期化のままだと上流の勾配がすべて0になるため乱数で置き換える。

    Returns:
        チェック名 → 最大相対誤差
    """
    from core.diffusion import ConditionInput
    from core.unet import ConditionalUNet, UNetConfig

    rng = np.random.default_rng(seed)
    config = UNetConfig(base_channels=8, depth=1, time_embed_dim=16, in_channels=3, groups=4)
    model = ConditionalUNet(config, seed=seed).astype(np.float64)
    model.out_conv.weight.values = rng.standard_normal(model.out_conv.weight.shape) * 0.1

    y_t = rng.standard_normal((2, 1, size, size))
    cond = ConditionInput(
        lr_up=rng.standard_normal((2, 1, size, size)),
        topo_norm=rng.standard_normal((1, 1, size, size)),
    )
    t = np.array([3, 17])

    def input_backward(g):
        model.zero_grad()
        return model.backward(g)

    results = {
        "unet.input": grad_check(
            lambda p: model.forward(p, cond, t), input_backward, Tensor(y_t), probe_count, seed
        ),
    }
    named = model.named_parameters()
    for name in ("time.0.weight", "input.weight", "down.0.block.0.norm1.gain", "mid.block.1.conv2.weight",
                 "up.0.block.1.conv1.bias", "out.conv.weight"):
        param = named[name]
        start = param.values.copy()

        def fwd(p, param=param):
            param.values = p
            return model.forward(y_t, cond, t)

        def bwd(g, param=param):
            model.zero_grad()
            model.backward(g)
            return param.grad

        results[f"unet.{name}"] = grad_check(fwd, bwd, start, probe_count, seed)
        param.values = start
    return results


def training_loss_gradient_check(seed: int = 0, probe_count: int = 20, size: int = 16) -> float:
    """
    training_loss を通した全パラメータの勾配チェック（32bit）

    32bitのモデルで逆伝播した解析的勾配を、同じ重みを64bitに変換した複製の中心差分と比較する。
    座標は全パラメータから probe_count 個を無作為に選ぶ。

    Returns:
        最大相対誤差
    """
    from core.diffusion import ConditionInput, build_schedule, q_sample, training_loss
    from core.unet import ConditionalUNet, UNetConfig

    rng = np.random.default_rng(seed)
    config = UNetConfig(base_channels=8, depth=1, time_embed_dim=16, in_channels=3, groups=4)
    model = ConditionalUNet(config, seed=seed)
    model.out_conv.weight.values = (rng.standard_normal(model.out_conv.weight.shape) * 0.1).astype(np.float32)
    schedule = build_schedule(10)

    y0 = rng.uniform(-1.0, 1.0, (2, 1, size, size)).astype(np.float32)
    eps = rng.standard_normal(y0.shape).astype(np.float32)
    cond = ConditionInput(
        lr_up=rng.uniform(-1.0, 1.0, (2, 1, size, size)).astype(np.float32),
        topo_norm=rng.standard_normal((1, 1, size, size)).astype(np.float32),
    )
    t = np.array([2, 7])

    model.zero_grad()
    training_loss(model, y0, cond, t, eps, schedule)

    shadow = ConditionalUNet(config, seed=seed).astype(np.float64)
    shadow_params = shadow.named_parameters()
    for name, param in model.named_parameters().items():
        shadow_params[name].values = param.values.astype(np.float64)
    cond64 = ConditionInput(lr_up=cond.lr_up.astype(np.float64), topo_norm=cond.topo_norm.astype(np.float64))
    y_t = q_sample(y0.astype(np.float64), t, eps.astype(np.float64), schedule)

    def loss64() -> float:
        diff = shadow.forward(y_t, cond64, t) - eps
        return float(np.mean(diff * diff))

    named = model.named_parameters()
    names = list(named)
    offsets = np.cumsum([0] + [named[n].size for n in names])
    worst = 0.0
    for flat in rng.choice(offsets[-1], size=probe_count, replace=False):
        k = int(np.searchsorted(offsets, flat, side="right")) - 1
        name = names[k]
        index = np.unravel_index(int(flat - offsets[k]), named[name].shape)
        target = shadow_params[name].values
        original = target[index]
        target[index] = original + FD_EPSILON
        plus = loss64()
        target[index] = original - FD_EPSILON
        minus = loss64()
        target[index] = original
        numeric = (plus - minus) / (2.0 * FD_EPSILON)
        worst = max(worst, relative_error(float(named[name].grad[index]), numeric))
    logger.info(f"training_loss の勾配チェック（32bit、{probe_count}座標）: {worst:.3e}")
    return worst


def run_gradient_suite(seed: int = 0, probe_count: int = 32) -> Dict[str, float]:
    """
    全層の勾配チェックを実行（8x8の乱数入力、64bit）

    Returns:
        チェック名 → 最大相対誤差
    """
    logger.info(f"勾配チェックを開始します（seed: {seed}、probe: {probe_count}）")
    rng = np.random.default_rng(seed)
    results: Dict[str, float] = {}
    results.update(_conv_suite(rng, probe_count))
    results.update(_group_norm_suite(rng, probe_count))
    results.update(_linear_suite(rng, probe_count))
    results.update(_elementwise_suite(rng, probe_count))

    # BGSのガイダンス勾配 ∇‖y − x‖₂
    from core.diffusion import bias_gradient, bias_norm
    y = rng.standard_normal((1, 1, 8, 8))
    target = rng.standard_normal((1, 1, 8, 8))
    results["bgs.f_gradient"] = grad_check(
        lambda p: bias_norm(p, target)[:, None, None, None],
        lambda g: g.reshape(-1)[0] * bias_gradient(y, target),
        y, probe_count,
    )

    for name, err in results.items():
        logger.info(f"  - {name}: {err:.3e}")
    logger.info(f"勾配チェックが完了しました（最大誤差: {max(results.values()):.3e}）")
    return results
