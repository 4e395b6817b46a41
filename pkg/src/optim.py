from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional

import numpy as np
from numpy.typing import NDArray

Array = NDArray[Any]


@dataclass(frozen=True)
class AdamSettings:
    """Fixed Adam hyper-parameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


class Adam:
    """Adam over named parameter groups with externally held moment buffers.

    Moments live in the caller's state so that checkpoints capture them.
    A group whose learning rate is 0 is frozen: neither its moments nor its
    values change.
    """

    def __init__(self, settings: AdamSettings = AdamSettings()) -> None:
        self.settings = settings

    def step(
        self,
        params: Mapping[str, Array],
        grads: Mapping[str, Array],
        first: Dict[str, Array],
        second: Dict[str, Array],
        step: int,
        lr: float,
        support: Optional[Mapping[str, NDArray[np.bool_]]] = None,
    ) -> None:
        """Update ``params`` in place; ``step`` is the 1-based update count."""
        if lr == 0.0:
            return
        beta1, beta2 = self.settings.beta1, self.settings.beta2
        bc1 = 1.0 - beta1**step
        bc2 = 1.0 - beta2**step
        for name, value in params.items():
            grad = grads[name].astype(value.dtype, copy=False)
            m = first[name]
            v = second[name]
            m *= beta1
            m += (1.0 - beta1) * grad
            v *= beta2
            v += (1.0 - beta2) * grad * grad
            update = (lr * (m / bc1) / (np.sqrt(v / bc2) + self.settings.epsilon)).astype(
                value.dtype, copy=False
            )
            if support is not None and name in support:
                update = np.where(support[name], update, 0)
            value -= update


def zero_moments(params: Mapping[str, Array]) -> Dict[str, Array]:
    return {name: np.zeros_like(value) for name, value in params.items()}
