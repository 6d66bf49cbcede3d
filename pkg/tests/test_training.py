"""Training loops: freeze discipline, dynamics, modes and stopping."""

import itertools
import warnings

import numpy as np
import pytest

from adfm.batch import collate
from adfm.errors import ConfigError, ContractError
from adfm.model import forward_main, init_params, load_checkpoint
from adfm.training import (
    EXTRACTOR_GROUPS,
    MAIN_GROUPS,
    MODES,
    SELECTOR_GROUPS,
    BatchStream,
    TrainConfig,
    phase_extractors,
    phase_selector,
    train,
)

from helpers import CH, moving_average, phase_objective_trace, random_prepared, small_config

OTHER_GROUPS = ("Embeddings", "IEU", "AIEU", "MainMLP", "AdvMLP")


def dataset(n=40, m=6, seed=0, config=None):
    config = config or small_config()
    rng = np.random.default_rng(seed)
    return [random_prepared(rng, m, config, user_id=i // 2, request_id=i) for i in range(n)]


def stream_for(prepared, config, batch_size=8, seed=0):
    return BatchStream(prepared, batch_size, config.channels, config.short_channels, seed=seed)


class TestFreezeDiscipline:
    def test_extractor_phase_leaves_selection_untouched(self):
        config = small_config()
        params = init_params(config, 0)
        before = {g: params.checksum(g) for g in (*OTHER_GROUPS, "BSU")}
        state = TrainConfig().adam(params.group(*EXTRACTOR_GROUPS))
        frag = phase_extractors(stream_for(dataset(), config), params, config, 5, state)
        assert params.checksum("BSU") == before["BSU"]
        for g in OTHER_GROUPS:
            assert params.checksum(g) != before[g], g
        for rec in frag.records:
            assert rec.phase == "extractor"
            assert rec.updated == sorted(EXTRACTOR_GROUPS)
            assert rec.loss_adv is not None

    def test_selector_phase_updates_only_selection(self):
        config = small_config()
        params = init_params(config, 0)
        before = {g: params.checksum(g) for g in OTHER_GROUPS}
        bsu = params.checksum("BSU")
        state = TrainConfig().adam(params.group(*SELECTOR_GROUPS), selector=True)
        frag = phase_selector(stream_for(dataset(), config), params, config, 5, state)
        assert params.checksum("BSU") != bsu
        for g in OTHER_GROUPS:
            assert params.checksum(g) == before[g], g
        assert all(rec.updated == ["BSU"] for rec in frag.records)

    def test_alternation_in_adversarial_mode(self):
        config = small_config()
        _, _, log = train(dataset(), TrainConfig(phase_len=3, max_steps=12, batch_size=8), config)
        phases = [r.phase for r in log.records]
        assert phases == (["extractor"] * 3 + ["selector"] * 3) * 2
        assert [r.step for r in log.records] == list(range(12))

    def test_zero_steps_is_a_no_op(self):
        config = small_config()
        params = init_params(config, 0)
        digest = params.checksum()
        state = TrainConfig().adam(params.group(*EXTRACTOR_GROUPS))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            frag = phase_extractors(stream_for(dataset(), config), params, config, 0, state)
            frag2 = phase_selector(stream_for(dataset(), config), params, config, 0, state)
        assert frag.records == frag2.records == []
        assert params.checksum() == digest

    def test_max_steps_zero_returns_initial_parameters(self):
        config = small_config()
        params, _, log = train(dataset(), TrainConfig(max_steps=0, seed=4), config)
        assert log.records == [] and log.status == "max_steps"
        assert params.checksum() == init_params(config, 4).checksum()


class TestDynamics:
    """Fixed single batch, 200 steps, 20-step moving average."""

    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize("phase", ["extractor", "selector"])
    def test_phase_objective_non_increasing(self, phase, seed):
        trace = phase_objective_trace(phase, seed)
        ma = moving_average(trace, 20)
        assert np.all(np.diff(ma) <= 0), np.diff(ma).max()
        assert ma[-1] < ma[0]

    @pytest.mark.xfail(
        strict=False,
        reason="a selector phase can demote the signal: shrinking its score in the rest "
        "partition also raises Loss_adv, and that gradient dominates while the signal "
        "is mostly unselected",
    )
    @pytest.mark.parametrize("seed", range(5))
    def test_planted_signal_rank(self, seed):
        """One behavior id appears in exactly the positive samples; after a
        selector phase its score rank improves or it stays in the top-k."""
        config, batch = self._planted(seed)
        params = init_params(config, seed)
        tc = TrainConfig(lr=1e-2)
        phase_extractors(itertools.repeat(batch), params, config, 100, tc.adam(params.group(*EXTRACTOR_GROUPS)))
        before = self._signal_ranks(params, config, batch)
        phase_selector(itertools.repeat(batch), params, config, 100, tc.adam(params.group(*SELECTOR_GROUPS)))
        after = self._signal_ranks(params, config, batch)
        assert np.all((after <= before) | (after < config.k_select))

    @staticmethod
    def _planted(seed):
        config = small_config(k_select=2, short_channels=[], profile_vocab=())
        rng = np.random.default_rng(seed)
        prepared = []
        for i in range(32):
            p = random_prepared(rng, 6, config, label=i % 2, user_id=i, request_id=i)
            ids = p.long_ids[CH]
            ids[ids == 0] = 8
            if p.label:
                ids[rng.integers(6)] = 0
            p.target[:] = 1
            prepared.append(p)
        return config, collate(prepared, config.channels, config.short_channels)

    @staticmethod
    def _signal_ranks(params, config, batch):
        _, (cf,) = forward_main(batch, params, config)
        ranks = []
        for b in range(len(batch)):
            pos = np.flatnonzero(batch.long[CH].ids[b] == 0)
            if pos.size:
                order = np.argsort(-cf.scores.data[b], kind="stable")
                ranks.append(int(np.flatnonzero(order == pos[0])[0]))
        return np.array(ranks)


class TestModes:
    def test_every_mode_runs(self):
        config = small_config()
        expected = {
            "adversarial": {"extractor": sorted(EXTRACTOR_GROUPS), "selector": ["BSU"]},
            "joint": {"joint": sorted(EXTRACTOR_GROUPS + SELECTOR_GROUPS)},
            "no_adversary": {"no_adversary": ["BSU", "Embeddings", "IEU", "MainMLP"]},
            "no_bsu": {"no_bsu": ["Embeddings", "IEU", "MainMLP"]},
            "sum_pool_baseline": {"sum_pool_baseline": ["Embeddings", "MainMLP"]},
        }
        for mode in MODES:
            params, trained, log = train(dataset(), TrainConfig(mode=mode, phase_len=2, max_steps=4, batch_size=8), config)
            assert len(log.records) == 4
            for rec in log.records:
                assert rec.updated == expected[mode][rec.phase], (mode, rec.phase)
            p, _ = forward_main(collate(dataset(5), config.channels, config.short_channels), params, trained)
            assert np.all((p.data > 0) & (p.data < 1))

    def test_mode_sets_pooling(self):
        config = small_config()
        pooling = {m: train(dataset(), TrainConfig(mode=m, max_steps=1, batch_size=8), config)[1].long_pooling for m in MODES}
        assert pooling == {
            "adversarial": "bsu",
            "joint": "bsu",
            "no_adversary": "bsu",
            "no_bsu": "ieu_all",
            "sum_pool_baseline": "sum",
        }

    def test_no_adversary_ignores_adversarial_parameters(self):
        config = small_config()
        tc = TrainConfig(mode="no_adversary", max_steps=6, batch_size=8)
        a = init_params(config, 1)
        b = a.copy()
        rng = np.random.default_rng(0)
        for name in (*b.group("AIEU"), *b.group("AdvMLP")):
            b[name].data[...] = rng.normal(0, 3, b[name].shape)
        adv_b = b.checksum("AIEU", "AdvMLP")
        a, _, log_a = train(dataset(), tc, config, a)
        b, _, log_b = train(dataset(), tc, config, b)
        assert a.checksum(*MAIN_GROUPS) == b.checksum(*MAIN_GROUPS)
        assert log_a.losses() == log_b.losses()
        assert b.checksum("AIEU", "AdvMLP") == adv_b
        assert all(r.loss_adv is None for r in log_a.records)

    def test_joint_objective_is_folded(self):
        config = small_config()
        _, _, log = train(dataset(), TrainConfig(mode="joint", max_steps=3, batch_size=8), config)
        assert all(r.loss_adv is not None for r in log.records)

    def test_invalid_mode(self):
        with pytest.raises(ConfigError):
            train(dataset(), TrainConfig(mode="gan"), small_config())

    @pytest.mark.parametrize("bad", [dict(phase_len=0), dict(stop_eps=0.0), dict(batch_size=0), dict(max_steps=-1)])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()

    def test_empty_dataset(self):
        with pytest.raises(ContractError):
            train([], TrainConfig(), small_config())



class TestLoop:
    def test_deterministic(self):
        config = small_config()
        tc = TrainConfig(phase_len=2, max_steps=8, batch_size=8, seed=3)
        p1, _, l1 = train(dataset(), tc, config)
        p2, _, l2 = train(dataset(), tc, config)
        assert p1.checksum() == p2.checksum()
        assert [r.to_json() for r in l1.records] == [r.to_json() for r in l2.records]

    def test_stops_on_small_changes(self):
        config = small_config()
        tc = TrainConfig(phase_len=2, max_steps=1000, batch_size=8, stop_eps=1e9, stop_window=1)
        _, _, log = train(dataset(), tc, config)
        assert log.status == "converged"
        assert len(log.records) == 2 * 2 * 2

    def test_stops_at_max_steps(self):
        config = small_config()
        tc = TrainConfig(phase_len=3, max_steps=7, batch_size=8, stop_eps=1e-12)
        _, _, log = train(dataset(), tc, config)
        assert log.status == "max_steps" and len(log.records) == 7

    def test_all_masked_warns(self):
        config = small_config(k_select=10)
        with pytest.warns(UserWarning, match="adversarially masked"):
            _, _, log = train(dataset(), TrainConfig(phase_len=2, max_steps=4, batch_size=8), config)
        assert all(r.loss_adv == 0.0 for r in log.records)
        # Loss_s still depends on the scores through the scaling of selected rows
        assert all(r.updated == ["BSU"] for r in log.records if r.phase == "selector")

    def test_selector_learning_rate(self):
        config = small_config()
        params = init_params(config)
        tc = TrainConfig(lr=1e-3, selector_lr=1e-5)
        assert tc.adam(params.group("BSU"), selector=True).lr == 1e-5
        assert tc.adam(params.group("IEU")).lr == 1e-3

    def test_periodic_checkpoint(self, tmp_path):
        config = small_config()
        path = tmp_path / "ck.npz"
        tc = TrainConfig(phase_len=2, max_steps=8, batch_size=8, checkpoint_every=1, checkpoint_path=str(path))
        params, trained, _ = train(dataset(), tc, config)
        loaded, config2, extra = load_checkpoint(path)
        assert extra == {"step": 8}
        assert loaded.checksum() == params.checksum()
        assert config2 == trained

    def test_write_log(self, tmp_path):
        import json

        _, _, log = train(dataset(), TrainConfig(phase_len=2, max_steps=4, batch_size=8), small_config())
        path = tmp_path / "log.jsonl"
        log.write_jsonl(path)
        lines = [json.loads(x) for x in path.read_text().splitlines()]
        assert len(lines) == 5 and lines[-1] == {"status": "max_steps"}
        assert lines[0]["phase"] == "extractor"


class TestBatchStream:
    def test_covers_each_epoch(self):
        config = small_config()
        prepared = dataset(n=20)
        stream = stream_for(prepared, config, batch_size=6)
        seen = []
        for _ in range(4):
            seen.extend(next(stream).request_ids.tolist())
        assert sorted(seen) == list(range(20))
        assert stream.epoch == 1

    def test_empty(self):
        with pytest.raises(ContractError):
            stream_for([], small_config())
