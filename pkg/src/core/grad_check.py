# src/core/grad_check.py

"""
So sánh gradient autograd với sai phân trung tâm, dùng để kiểm chứng các hàm loss.
"""
import logging
from typing import Callable, Sequence, Union

import torch

from .exceptions import DataError, NumericalError

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-5
DENOMINATOR_FLOOR = 1e-6

LossOp = Callable[..., torch.Tensor]


def _evaluate(loss_op: LossOp, inputs: Sequence[torch.Tensor]) -> torch.Tensor:
    value = loss_op(*inputs)
    if value.numel() != 1:
        raise DataError(f"loss_op phải trả về scalar, nhận được shape {tuple(value.shape)}")
    if not bool(torch.isfinite(value).all()):
        raise NumericalError(f"Loss không hữu hạn trong grad check: {value.item()}")
    return value.reshape(())


def grad_check(loss_op: LossOp, inputs: Union[torch.Tensor, Sequence[torch.Tensor]],
               epsilon: float = DEFAULT_EPSILON) -> float:
    """
    Sai số tương đối lớn nhất |g_autograd - g_numeric| / max(|g_numeric|, 1e-6) trên mọi tọa độ.

    Args:
        loss_op: hàm nhận các tensor input và trả về scalar.
        inputs: tensor float64 (một hoặc nhiều); không bị thay đổi sau khi chạy.
        epsilon: bước sai phân.
    """
    if torch.is_tensor(inputs):
        inputs = [inputs]
    tensors = [t.detach().clone() for t in inputs]
    for t in tensors:
        if t.dtype != torch.float64:
            raise DataError(f"grad_check cần tensor float64, nhận được {t.dtype}")

    leaves = [t.clone().requires_grad_(True) for t in tensors]
    loss = _evaluate(loss_op, leaves)
    analytic = torch.autograd.grad(loss, leaves, allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g.detach() for t, g in zip(tensors, analytic)]

    worst = 0.0
    with torch.no_grad():
        for index, tensor in enumerate(tensors):
            flat = tensor.view(-1)
            grad_flat = analytic[index].reshape(-1)
            for k in range(flat.numel()):
                original = flat[k].item()
                flat[k] = original + epsilon
                plus = _evaluate(loss_op, tensors).item()
                flat[k] = original - epsilon
                minus = _evaluate(loss_op, tensors).item()
                flat[k] = original
                numeric = (plus - minus) / (2.0 * epsilon)
                error = abs(grad_flat[k].item() - numeric) / max(abs(numeric), DENOMINATOR_FLOOR)
                worst = max(worst, error)
    logger.debug(f"grad_check: {sum(t.numel() for t in tensors)} tọa độ, sai số lớn nhất {worst:.3e}")
    return worst
