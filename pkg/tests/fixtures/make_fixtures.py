"""Regenerate the trained fixture networks in this directory.

    python3 tests/fixtures/make_fixtures.py

The parking net classifies points of [0, 2]^2 by quadrant (four lots) with
one hidden layer of 20 ReLU neurons.  Training is seeded and runs on CPU.
"""

from pathlib import Path

import numpy as np
import torch

from premap.model import AffineLayer, Network, save_network

HERE = Path(__file__).parent


def quadrant(x: np.ndarray) -> np.ndarray:
    return (x[:, 0] >= 1).astype(int) + 2 * (x[:, 1] >= 1).astype(int)


def train_parking(seed: int = 0, steps: int = 3000) -> Network:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 2.0, (4000, 2))
    y = quadrant(x)
    model = torch.nn.Sequential(torch.nn.Linear(2, 20), torch.nn.ReLU(), torch.nn.Linear(20, 4))
    model = model.double()
    opt = torch.optim.Adam(model.parameters(), lr=0.01)
    xt, yt = torch.tensor(x), torch.tensor(y)
    for _ in range(steps):
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(model(xt), yt)
        loss.backward()
        opt.step()
    acc = (model(xt).argmax(1) == yt).double().mean().item()
    print(f"parking net: loss {loss.item():.4f}, train accuracy {acc:.4f}")
    l1, l2 = model[0], model[2]
    return Network([
        AffineLayer(l1.weight.detach().numpy(), l1.bias.detach().numpy(), relu=True),
        AffineLayer(l2.weight.detach().numpy(), l2.bias.detach().numpy()),
    ])


if __name__ == "__main__":
    save_network(train_parking(), HERE / "parking.json")
