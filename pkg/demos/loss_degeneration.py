"""The uncertainty-aware triplet loss with every variance entry at 0.5 is the
plain hinge triplet loss; a larger shared variance shrinks every hinge."""

import numpy as np

from pfl.core_math import make_rng
from pfl.losses import triplet_loss_normal, triplet_loss_uncertainty
from pfl.sampling import enumerate_triplets


def main() -> None:
    rng = make_rng(3)
    mu = rng.standard_normal((6, 2, 4))  # entries, parts, channels
    T = enumerate_triplets(np.array([0, 0, 1, 1, 2, 2]))
    plain = triplet_loss_normal(T, mu, 0.2)
    print(f"{len(T)} batch-all triplets, plain loss {plain:.6f}")
    for var in (0.5, 1.0, 2.0):
        sigma = np.full_like(mu, np.sqrt(var))
        print(f"sigma^2 = {var:3.1f}: uncertainty-aware {triplet_loss_uncertainty(T, mu, sigma, 0.2):.6f}")


if __name__ == "__main__":
    main()
