"""
In-place optimizers over a ParameterSet.

Both follow the update rules of torch.optim.SGD (momentum, no dampening)
and torch.optim.Adam / AdamW (decoupled weight decay).
"""

import logging

import numpy as np

from core.exceptions import ConfigurationError
from core.utils import run_validators
from core.validators import validate_non_negative, validate_range


logger = logging.getLogger(__name__)

OPTIMIZER_KINDS = ('adam', 'sgd-momentum')


class Optimizer:
    """Base optimizer; ``step`` updates the parameter arrays in place."""

    def __init__(self, parameters, lr):
        run_validators(lr, [validate_non_negative('lr')])
        self.parameters = parameters
        self.lr = lr
        self.steps = 0

    def step(self, gradients):
        self.steps += 1
        for name, value in self.parameters.items():
            value -= self.update(name, gradients[name])

    def update(self, name, grad):
        raise NotImplementedError


class SGDMomentum(Optimizer):

    def __init__(self, parameters, lr=1e-2, momentum=0.9):
        super().__init__(parameters, lr)
        run_validators(momentum, [validate_range(0, 1, 'momentum', inclusive_max=False)])
        self.momentum = momentum
        self.velocity = parameters.zeros_like()

    def update(self, name, grad):
        velocity = self.velocity[name]
        velocity *= self.momentum
        velocity += grad
        return self.lr * velocity


class Adam(Optimizer):
    """
    Adam with bias correction; ``weight_decay > 0`` gives AdamW.

    Decay is applied to the parameter directly, scaled by the learning
    rate, and never enters the moment estimates.
    """

    def __init__(self, parameters, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(parameters, lr)
        for beta in betas:
            run_validators(beta, [validate_range(0, 1, 'beta', inclusive_max=False)])
        run_validators(weight_decay, [validate_non_negative('weight_decay')])
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.first = parameters.zeros_like()
        self.second = parameters.zeros_like()

    def update(self, name, grad):
        beta1, beta2 = self.betas
        first, second = self.first[name], self.second[name]
        first *= beta1
        first += (1.0 - beta1) * grad
        second *= beta2
        second += (1.0 - beta2) * grad * grad
        corrected_first = first / (1.0 - beta1 ** self.steps)
        corrected_second = second / (1.0 - beta2 ** self.steps)
        delta = self.lr * corrected_first / (np.sqrt(corrected_second) + self.eps)
        if self.weight_decay:
            delta = delta + self.lr * self.weight_decay * self.parameters[name]
        return delta


def build_optimizer(kind, parameters, lr, weight_decay=0.0, momentum=0.9):
    """
    Args:
        kind: 'adam' or 'sgd-momentum'
        parameters: ParameterSet updated in place
    """
    if kind == 'adam':
        return Adam(parameters, lr=lr, weight_decay=weight_decay)
    if kind == 'sgd-momentum':
        return SGDMomentum(parameters, lr=lr, momentum=momentum)
    raise ConfigurationError(
        f'Unknown optimizer "{kind}".',
        code='UNKNOWN_OPTIMIZER',
        details={'choices': list(OPTIMIZER_KINDS)},
    )
