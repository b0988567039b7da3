import numpy as np
import pytest
from cogstitch import ContractError, Dataset, DatasetError, DatasetMeta, EpisodeOrigin, Transition, filter_successful, load, sample_batch, save
from cogstitch.datasets import from_trajectories, load_binary, load_jsonl, save_binary, save_jsonl
from cogstitch.utils import make_rng


def _random_dataset(rng: np.random.Generator, transitions: int, per_trajectory: int = 10, labeled: bool = True) -> Dataset:
    ds = Dataset(DatasetMeta(env="place_in_box", obs_dim=6, reward_labeled=labeled, seed=7))
    for start in range(0, transitions, per_trajectory):
        n = min(per_trajectory, transitions - start)
        rewards = rng.integers(0, 2, n) if labeled else np.zeros(n)
        ds.append([Transition(rng.normal(size=6), rng.uniform(-1, 1, 8), float(r), rng.normal(size=6)) for r in rewards])
    return ds


def _constant_dataset(value: float, size: int) -> Dataset:
    t = Transition(np.full(6, value), np.zeros(8), 0.0, np.full(6, value))
    return from_trajectories(DatasetMeta(env="place_in_box", obs_dim=6), [[t] * size])


def test_transition_checks():
    with pytest.raises(ContractError):
        Transition(np.zeros(6), np.zeros(8), 0.5, np.zeros(6))
    with pytest.raises(ContractError):
        Transition(np.zeros(6), np.zeros(7), 0.0, np.zeros(6))
    with pytest.raises(ContractError):
        Transition(np.zeros(6), np.zeros(8), 0.0, np.zeros(5))


def test_append_records_boundaries():
    ds = _random_dataset(make_rng(0), 25)
    assert len(ds) == 25
    assert ds.trajectory_starts == [0, 10, 20]
    assert ds.trajectory_bounds()[-1] == (20, 25)
    assert len(ds.trajectory(2)) == 5


def test_append_grows_past_capacity():
    ds = Dataset(DatasetMeta(env="place_in_box", obs_dim=6), capacity=1)
    t = Transition(np.ones(6), np.zeros(8), 1.0, np.ones(6))
    for _ in range(5):
        ds.append([t, t, t])
    assert len(ds) == 15
    assert np.all(ds.obs == 1.0)


def test_append_rejects_other_layout():
    ds = Dataset(DatasetMeta(env="drawer_grasp", obs_dim=12))
    with pytest.raises(ContractError):
        ds.append([Transition(np.zeros(6), np.zeros(8), 0.0, np.zeros(6))])


def test_reward_free_dataset_rejects_rewards():
    ds = Dataset(DatasetMeta(env="place_in_box", obs_dim=6, reward_labeled=False))
    with pytest.raises(ContractError):
        ds.append([Transition(np.zeros(6), np.zeros(8), 1.0, np.zeros(6))])


def test_relabeled_drops_rewards():
    ds = _random_dataset(make_rng(1), 40)
    free = ds.relabeled(False)
    assert not free.meta.reward_labeled and np.all(free.rewards == 0.0)
    assert ds.meta.reward_labeled and ds.rewards.sum() > 0


@pytest.mark.parametrize("suffix", [".jsonl", ".bin"])
def test_save_load_is_exact(tmp_path, suffix):
    ds = _random_dataset(make_rng(2), 1000, per_trajectory=37)
    loaded = load(save(ds, tmp_path / f"data{suffix}"))
    assert loaded.meta == ds.meta
    assert loaded.trajectory_starts == ds.trajectory_starts
    for name in ("obs", "actions", "rewards", "next_obs"):
        assert np.array_equal(getattr(loaded, name), getattr(ds, name))


@pytest.mark.parametrize("suffix", [".jsonl", ".bin"])
def test_empty_dataset_round_trip(tmp_path, suffix):
    ds = Dataset(DatasetMeta(env="drawer_grid", obs_dim=8, reward_labeled=False))
    loaded = load(save(ds, tmp_path / f"empty{suffix}"))
    assert len(loaded) == 0 and loaded.num_trajectories == 0
    assert not loaded.meta.reward_labeled


def test_binary_corruption_is_detected(tmp_path):
    path = save_binary(_random_dataset(make_rng(3), 50), tmp_path / "data.bin")
    blob = bytearray(path.read_bytes())
    blob[100] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(DatasetError, match="checksum"):
        load_binary(path)


def test_binary_bad_magic(tmp_path):
    path = tmp_path / "data.bin"
    path.write_bytes(b"PARQUET1" + b"\x00" * 32)
    with pytest.raises(DatasetError, match="offset 0"):
        load_binary(path)


def test_jsonl_malformed_line_names_its_number(tmp_path):
    path = save_jsonl(_random_dataset(make_rng(4), 5), tmp_path / "data.jsonl")
    lines = path.read_text().splitlines()
    lines[3] = lines[3][:20]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=":4:"):
        load_jsonl(path)


def test_jsonl_rejects_nonbinary_reward(tmp_path):
    path = save_jsonl(_random_dataset(make_rng(5), 3), tmp_path / "data.jsonl")
    lines = path.read_text().splitlines()
    lines[1] = lines[1].replace('"r": 0.0', '"r": 0.5').replace('"r": 1.0', '"r": 0.5')
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="reward"):
        load_jsonl(path)


def test_missing_dataset(tmp_path):
    with pytest.raises(DatasetError):
        load(tmp_path / "nothing.jsonl")


def test_sample_batch_is_seeded():
    union = [_random_dataset(make_rng(6), 30)]
    a = sample_batch(union, 16, make_rng(1))
    b = sample_batch(union, 16, make_rng(1))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert len(a) == 16


def test_sample_from_singleton():
    ds = _random_dataset(make_rng(7), 1)
    batch = sample_batch([ds], 1, make_rng(0))
    assert np.array_equal(batch.obs[0], ds.obs[0])
    assert np.array_equal(batch.next_obs[0], ds.next_obs[0])


def test_sample_batch_weights_by_size():
    small, large = _constant_dataset(0.0, 10), _constant_dataset(1.0, 90)
    rng = make_rng(8)
    hits = sum(int(np.sum(sample_batch([small, large], 100_000, rng).obs[:, 0] == 0.0)) for _ in range(10))
    share = hits / 1_000_000
    assert share == pytest.approx(0.10, abs=0.01)


def test_sample_keeps_rows_together():
    ds = _random_dataset(make_rng(9), 200)
    batch = sample_batch([ds, _random_dataset(make_rng(10), 100)], 64, make_rng(2))
    for obs, action in zip(batch.obs, batch.actions):
        matches = np.flatnonzero((ds.obs == obs).all(axis=1))
        if len(matches):
            assert np.array_equal(ds.actions[matches[0]], action)


def test_sample_from_empty_union():
    with pytest.raises(ContractError):
        sample_batch([Dataset(DatasetMeta(env="place_in_box", obs_dim=6))], 4, make_rng(0))
    with pytest.raises(ContractError):
        sample_batch([], 4, make_rng(0))


def test_filter_successful_keeps_rewarded_trajectories():
    meta = DatasetMeta(env="place_in_box", obs_dim=6)
    rng = make_rng(11)
    winners = set(rng.choice(100, size=37, replace=False).tolist())
    trajectories = []
    for j in range(100):
        rewards = [0.0, 0.0, 1.0 if j in winners else 0.0]
        trajectories.append([Transition(np.full(6, float(j)), np.zeros(8), r, np.full(6, float(j))) for r in rewards])
    kept = filter_successful(from_trajectories(meta, trajectories))
    assert kept.num_trajectories == 37
    assert len(kept) == 37 * 3
    assert {int(kept.obs[start, 0]) for start in kept.trajectory_starts} == winners


def test_filter_needs_labels():
    with pytest.raises(ContractError):
        filter_successful(_random_dataset(make_rng(12), 10, labeled=False))


def _dataset_with_origins() -> Dataset:
    ds = Dataset(DatasetMeta(env="drawer_grasp", obs_dim=6))
    for j in range(4):
        rewards = [0.0, 1.0 if j % 2 else 0.0]
        origin = EpisodeOrigin("open_drawer", 100 + j) if j != 2 else None
        ds.append([Transition(np.full(6, float(j)), np.zeros(8), r, np.full(6, float(j))) for r in rewards], origin)
    return ds


@pytest.mark.parametrize("suffix", [".jsonl", ".bin"])
def test_origins_survive_save_and_load(tmp_path, suffix):
    ds = _dataset_with_origins()
    loaded = load(save(ds, tmp_path / f"data{suffix}"))
    assert loaded.origins == [EpisodeOrigin("open_drawer", 100), EpisodeOrigin("open_drawer", 101), None, EpisodeOrigin("open_drawer", 103)]


def test_copy_and_filter_keep_origins():
    ds = _dataset_with_origins()
    assert ds.copy().origins == ds.origins
    assert filter_successful(ds).origins == [EpisodeOrigin("open_drawer", 101), EpisodeOrigin("open_drawer", 103)]


def test_malformed_origin_is_a_dataset_error(tmp_path):
    path = save_jsonl(_dataset_with_origins(), tmp_path / "data.jsonl")
    lines = path.read_text().splitlines()
    lines[1] = lines[1].replace('"origin": {"cond": "open_drawer", "reset_seed": 100}', '"origin": "open_drawer"')
    assert '"origin": "open_drawer"' in lines[1]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError):
        load_jsonl(path)
