import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nanovlm import tensor as T
from nanovlm.model import ITC_ONLY_PARAMS, ModelConfig, init_params
from nanovlm.optim import adam_init, adam_step
from nanovlm.tokenizer import build_vocab
from nanovlm.trainer import (ABLATION_VARIANTS, EarlyStopping, PlateauSchedule,
                             TrainConfig, TrainerError, TrainingDiverged,
                             apply_ablation, assemble_batch, build_item,
                             forward_losses, kfold_split, train,
                             write_history_csv)

VOCAB_TEXTS = ["round bright grains", "thin long strands", "square flat cells",
               "dark deep holes", "what does the image show"]


def tiny_setup(n_items=4, seed=0):
    vocab = build_vocab(VOCAB_TEXTS)
    cfg = ModelConfig(vocab_size=len(vocab), embed_dim=8, heads=2, head_dim=4,
                      layers=1, ff_mult=2, max_text_len=8, max_answer_len=8,
                      itc_proj_dim=4, num_patches=4, patch_dim=6)
    rng = np.random.default_rng(seed)
    answers = ["round bright grains", "thin long strands", "square flat cells",
               "dark deep holes"]
    items = []
    for i in range(n_items):
        patches = rng.standard_normal((4, 6)).astype(np.float32)
        items.append(build_item(patches, "what does the image show",
                                answers[i % len(answers)], vocab, cfg,
                                category="particles"))
    return vocab, cfg, items


class TestKfold:
    def test_even_split(self):
        folds = kfold_split(20, 10, seed=0)
        assert [len(f) for f in folds] == [2] * 10

    def test_remainder_spread(self):
        folds = kfold_split(21, 10, seed=0)
        sizes = sorted(len(f) for f in folds)
        assert sizes == [2] * 9 + [3]
        combined = np.concatenate(folds)
        assert sorted(combined.tolist()) == list(range(21))

    def test_deterministic(self):
        a = kfold_split(17, 4, seed=3)
        b = kfold_split(17, 4, seed=3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_too_few_items_rejected(self):
        with pytest.raises(TrainerError):
            kfold_split(5, 10, seed=0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 60), st.integers(2, 10), st.integers(0, 5))
    def test_partition_property(self, n, k, seed):
        if n < k:
            return
        folds = kfold_split(n, k, seed)
        combined = sorted(np.concatenate(folds).tolist())
        assert combined == list(range(n))
        assert max(len(f) for f in folds) - min(len(f) for f in folds) <= 1


class TestPlateauSchedule:
    def test_flat_losses_halve_after_patience(self):
        sched = PlateauSchedule(lr=1e-3, patience=5)
        for _ in range(5):
            sched.step(1.0)
            assert sched.lr == 1e-3
        sched.step(1.0)
        assert sched.lr == pytest.approx(5e-4)

    def test_strictly_decreasing_keeps_lr(self):
        sched = PlateauSchedule(lr=1e-3, patience=5)
        for loss in np.linspace(1.0, 0.1, 20):
            sched.step(float(loss))
        assert sched.lr == 1e-3

    def test_improvement_resets_counter(self):
        sched = PlateauSchedule(lr=1e-3, patience=5)
        for loss in [1.0, 1.0, 1.0, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0]:
            sched.step(loss)
        assert sched.lr == 1e-3  # counter restarted at the improvement


class TestEarlyStopping:
    def test_triggers_after_patience(self):
        stopper = EarlyStopping(patience=3)
        stops = [stopper.step(loss)[1] for loss in [1.0, 0.5, 0.6, 0.6, 0.6]]
        assert stops == [False, False, False, False, True]

    def test_improvement_resets(self):
        stopper = EarlyStopping(patience=2)
        for loss in [1.0, 0.9, 0.95, 0.8, 0.85]:
            _, stop = stopper.step(loss)
        assert not stop


class TestTrainConfig:
    def test_batch_floor(self):
        with pytest.raises(TrainerError):
            TrainConfig(batch_size=1)

    def test_unknown_variant(self):
        with pytest.raises(TrainerError):
            TrainConfig(ablation="no_everything")

    def test_ablation_mapping(self):
        mcfg = ModelConfig(vocab_size=10, embed_dim=8, heads=2, head_dim=4,
                           num_patches=4, patch_dim=6)
        for variant, probe in (("no_sa", "ablate_sa"), ("no_ca", "ablate_ca"),
                               ("no_csa", "ablate_csa")):
            out, weights = apply_ablation(mcfg, TrainConfig(ablation=variant, batch_size=2))
            assert getattr(out, probe) is True
            assert weights == (1.0, 1.0, 1.0)
        _, weights = apply_ablation(mcfg, TrainConfig(ablation="no_itc", batch_size=2))
        assert weights[0] == 0.0
        _, weights = apply_ablation(mcfg, TrainConfig(ablation="no_ctc", batch_size=2))
        assert weights[1] == 0.0
        assert set(ABLATION_VARIANTS) == {"none", "no_itc", "no_ctc", "no_sa", "no_ca", "no_csa"}


class TestBatchAssembly:
    def test_negatives_use_different_captions(self):
        _, cfg, items = tiny_setup(4)
        rng = np.random.default_rng(0)
        batch = assemble_batch(items, rng)
        for i, j in enumerate(batch.neg_index):
            assert j != i
            assert items[j].answer_key != items[i].answer_key

    def test_decoder_targets_are_shifted_inputs(self):
        _, cfg, items = tiny_setup(1 + 1)
        batch = assemble_batch(items, np.random.default_rng(0))
        for i, item in enumerate(items):
            n = len(item.dec_input)
            assert batch.dec_ids[i, :n].tolist() == item.dec_input
            assert batch.dec_targets[i, : n - 1].tolist() == item.dec_input[1:]
            # loss positions start at the <decode> slot
            first = next(k for k, w in enumerate(item.dec_weight) if w)
            from nanovlm.tokenizer import DECODE_ID
            assert item.dec_input[first] == DECODE_ID


class TestTraining:
    def test_bitwise_deterministic(self):
        _, cfg, items = tiny_setup(4)
        tcfg = TrainConfig(epochs=3, lr=1e-3, batch_size=4, seed=9)
        r1 = train(cfg, tcfg, items)
        r2 = train(cfg, tcfg, items)
        assert all(np.array_equal(r1.params[k].data, r2.params[k].data)
                   for k in r1.params)
        assert r1.history == r2.history

    def test_step_count_without_early_stop(self):
        _, cfg, items = tiny_setup(4)
        tcfg = TrainConfig(epochs=5, batch_size=2, seed=0, early_stop_patience=10 ** 6)
        result = train(cfg, tcfg, items)
        assert len(result.history) == 5 * int(np.ceil(len(items) / 2))

    def test_empty_dataset_rejected(self):
        _, cfg, _ = tiny_setup(2)
        with pytest.raises(TrainerError):
            train(cfg, TrainConfig(batch_size=2), [])

    def test_nan_aborts_with_diagnostics(self):
        _, cfg, items = tiny_setup(4)
        params = init_params(cfg, seed=0)
        params["lm.bias"].data[:] = np.nan
        tcfg = TrainConfig(epochs=1, batch_size=4, seed=4)
        with pytest.raises(TrainingDiverged, match="step 0.*seed 4"):
            train(cfg, tcfg, items, params=params)

    def test_loss_history_finite(self):
        _, cfg, items = tiny_setup(4)
        result = train(cfg, TrainConfig(epochs=4, batch_size=4, seed=1), items)
        for row in result.history:
            assert np.isfinite(float(row["joint"]))

    def test_early_stopping_on_worsening_validation(self):
        _, cfg, items = tiny_setup(4)
        # validation on held-out random items quickly stops improving
        _, _, val_items = tiny_setup(4, seed=99)
        tcfg = TrainConfig(epochs=60, batch_size=4, seed=2, early_stop_patience=2,
                           scheduler_patience=1)
        result = train(cfg, tcfg, items, val_items=val_items)
        assert result.stopped_epoch < 60

    def test_history_csv_layout(self, tmp_path):
        _, cfg, items = tiny_setup(4)
        result = train(cfg, TrainConfig(epochs=2, batch_size=4, seed=0), items)
        write_history_csv(tmp_path / "history.csv", result.history)
        with open(tmp_path / "history.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["step", "itc", "itm", "lm", "joint", "lr"]
        assert float(rows[0]["itc"]) > 0

    def test_no_itc_logs_excluded_column(self):
        _, cfg, items = tiny_setup(4)
        tcfg = TrainConfig(epochs=2, batch_size=4, seed=0, ablation="no_itc")
        result = train(cfg, tcfg, items)
        assert all(row["itc"] == "" for row in result.history)
        assert all(row["itm"] != "" for row in result.history)


class TestAblationGradients:
    def test_no_itc_gives_exactly_zero_itc_gradients(self):
        _, cfg, items = tiny_setup(4)
        params = init_params(cfg, seed=0)
        T.zero_grads(params)
        batch = assemble_batch(items, np.random.default_rng(0))
        itc, itm, lm, joint = forward_losses(params, cfg, batch, (0.0, 1.0, 1.0))
        assert itc is None
        T.backward(joint)
        for name in ITC_ONLY_PARAMS:
            assert not params[name].grad.any(), name
        before = {n: params[n].data.copy() for n in ITC_ONLY_PARAMS}
        state = adam_init(params, lr=1e-3)
        adam_step(params, state)
        for name in ITC_ONLY_PARAMS:
            assert np.array_equal(params[name].data, before[name])
