import numpy as np
import pytest

from tdlab.chain import MarkovRewardProcess, random_mrp
from tdlab.geometry import FeatureMap, build_system
from tdlab.harness import build_example1
from tdlab.rng import generator

EX1_P = np.array([[0.2, 0.8], [0.3, 0.7]])
EX1_PSI = np.array([3 / 11, 8 / 11])


@pytest.fixture
def example1():
    mrp, features = build_example1(0.9)
    return mrp, features, build_system(mrp, features)


def random_instance(seed, n_states=10, d=3, beta=0.9):
    mrp = random_mrp(n_states, seed, discount=beta)
    phi = generator(seed, 99).random((n_states, d))
    return mrp, FeatureMap(phi)


def example1_oracle(beta=0.9):
    """Independent dense computation of A, b, theta* for the two-state example."""
    P = EX1_P
    r = np.array([1.0, 2.0])
    phi = np.array([[1.0], [2.0]])
    Psi = np.diag(EX1_PSI)
    A = phi.T @ Psi @ (np.eye(2) - beta * P) @ phi
    b = phi.T @ Psi @ r
    return A, b, np.linalg.solve(A, b)


def zero_reward(mrp):
    return MarkovRewardProcess(mrp.transition, np.zeros(mrp.n_states), mrp.discount)
