import numpy as np
import pytest

from moofair.data import RawRatings, build_masks, preprocess

GENRES = ("Action", "Comedy", "Drama", "Romance", "Sci-Fi")


def make_raw(seed=0, num_users=30, num_core_items=25, num_tail_items=15,
             with_attributes=True, max_positives=None):
    """Small synthetic rating log that survives the preprocessing filters.

    Every user rates at least 14 core items positively (so the >=10-positives
    filter keeps everyone), while tail items are rated sporadically so some of
    them get dropped by the >=5-ratings item filter.
    """
    gen = np.random.default_rng(seed)
    num_items = num_core_items + num_tail_items
    users, items, ratings, stamps = [], [], [], []
    core_cap = min(max_positives or num_core_items, num_core_items)
    for u in range(num_users):
        n_core = int(gen.integers(14, core_cap + 1))
        core = gen.choice(num_core_items, size=n_core, replace=False)
        n_tail = int(gen.integers(0, 4))
        tail = num_core_items + gen.choice(num_tail_items, size=n_tail, replace=False)
        chosen = np.concatenate([core, tail])
        t = 1000 * u
        for it in chosen:
            users.append(u + 1)  # original ids are 1-based like the real logs
            items.append(int(it) + 1)
            is_core = it < num_core_items
            rating = int(gen.choice([4, 5])) if is_core else int(gen.integers(1, 6))
            ratings.append(rating)
            t += int(gen.integers(1, 50))
            stamps.append(t)
    raw = RawRatings(
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        ratings=np.asarray(ratings, dtype=np.float64),
        timestamps=np.asarray(stamps, dtype=np.int64),
    )
    if with_attributes:
        ages = (5, 19, 27, 38, 47, 52, 61)
        raw.user_gender = {u + 1: ("F" if u % 2 == 0 else "M") for u in range(num_users)}
        raw.user_age = {u + 1: ages[u % len(ages)] for u in range(num_users)}
        raw.item_genres = {
            i + 1: tuple(sorted(gen.choice(len(GENRES),
                                           size=int(gen.integers(1, 4)),
                                           replace=False).tolist()))
            for i in range(num_items)
        }
        raw.genre_names = GENRES
    return raw


@pytest.fixture(scope="session")
def synthetic_raw():
    return make_raw(seed=0)


@pytest.fixture(scope="session")
def synthetic_dataset(synthetic_raw):
    return preprocess(synthetic_raw)


@pytest.fixture(scope="session")
def synthetic_masks(synthetic_raw, synthetic_dataset):
    return build_masks(synthetic_dataset, synthetic_raw)


def finite_difference_gradient(fn, theta, step=1e-6):
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for k in range(theta.shape[0]):
        bumped = theta.copy()
        bumped[k] = theta[k] + step
        up = fn(bumped)
        bumped[k] = theta[k] - step
        down = fn(bumped)
        grad[k] = (up - down) / (2.0 * step)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    """Worst-case elementwise relative error with an absolute floor."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
