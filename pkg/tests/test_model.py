import numpy as np
import pytest

from htsc.data.corpus import Batch, Corpus
from htsc.debug import gradcheck
from htsc.models.model import HTSCModel, Stage1Draws
from htsc.training.checkpoint import Checkpoint, transfer_shared
from htsc.training.config import Config
from htsc.utils.errors import ConfigError
from htsc.utils.utils import RngFactory


def first_batch(corpus: Corpus, size: int = 4) -> Batch:
    return next(corpus.batches("train", size))


def transferred_pair(config: Config):
    stage1 = HTSCModel(config, 1)
    stage2 = HTSCModel(config, 2)
    checkpoint = Checkpoint.from_bytes(Checkpoint.from_model(stage1, config.hash(), 1).to_bytes())
    report = transfer_shared(stage2, checkpoint)
    return stage1, stage2, report


def grads_under(model: HTSCModel, prefix: str):
    return [param.grad for name, param in model.named_parameters() if name.startswith(prefix)]


def test_parameter_names_carry_their_owner_prefix(config: Config) -> None:
    stage1 = HTSCModel(config, 1)
    stage2 = HTSCModel(config, 2)
    assert {name.split(".")[0] for name, _ in stage1.named_parameters()} == {"enc", "dec", "eclo"}
    assert {name.split(".")[0] for name, _ in stage2.named_parameters()} == {"enc", "dec", "vdm", "ldm", "fuse"}
    assert stage1.shared_names() == stage2.shared_names()
    assert stage2.fresh_names()
    assert all(name.startswith(("vdm.", "ldm.", "fuse.")) for name in stage2.fresh_names())


def test_unknown_stage_is_rejected(config: Config) -> None:
    with pytest.raises(ConfigError):
        HTSCModel(config, 3)


def test_default_initialisation_is_seeded(config: Config) -> None:
    a = HTSCModel(config, 1).state_dict()
    b = HTSCModel(config, 1).state_dict()
    assert all(np.array_equal(a[name], b[name]) for name in a)
    c = HTSCModel(config.replace(seed=1), 1).state_dict()
    assert not np.array_equal(a["enc.vis.stem.weight"], c["enc.vis.stem.weight"])


def test_stage1_loss_components(config: Config, corpus: Corpus) -> None:
    model = HTSCModel(config, 1)
    batch = first_batch(corpus)
    draws = Stage1Draws.sample(batch, config, RngFactory(0), 0, 0)
    losses = model.stage1_losses(batch, draws)
    lam = config["train.lambda"]
    assert losses.value == pytest.approx(lam * losses["low"] + (1 - lam) * losses["mid"], rel=1e-5)
    assert losses["low"] == pytest.approx(losses["cls"] + losses["loc"], rel=1e-5)
    assert losses["mid"] == pytest.approx(losses["plm"] + losses["mim"], rel=1e-5)
    assert set(losses.dict()) == {"total", "low", "cls", "loc", "mid", "plm", "mim"}


def test_switched_off_level_leaves_the_other_unweighted(make_config, corpus: Corpus) -> None:
    config = make_config(levels__mid=False)
    model = HTSCModel(config, 1)
    batch = first_batch(corpus)
    losses = model.stage1_losses(batch, Stage1Draws.sample(batch, config, RngFactory(0), 0, 0))
    assert losses["mid"] is None
    assert losses.value == pytest.approx(losses["low"])
    with pytest.raises(ConfigError):
        HTSCModel(make_config(levels__mid=False, levels__low=False), 1).stage1_losses(batch, Stage1Draws.sample(batch, config, RngFactory(0), 0, 0))


def test_lambda_one_leaves_mid_level_parameters_untouched(config: Config, corpus: Corpus) -> None:
    model = HTSCModel(config, 1)
    batch = first_batch(corpus)
    draws = Stage1Draws.sample(batch, config, RngFactory(0), 0, 0)
    model.stage1_losses(batch, draws, lam=1.0).total.backward()
    for grad in grads_under(model, "dec."):
        assert grad is None or not np.any(grad)
    assert any(grad is not None and np.any(grad) for grad in grads_under(model, "eclo."))


def test_lambda_zero_leaves_entity_heads_untouched(config: Config, corpus: Corpus) -> None:
    model = HTSCModel(config, 1)
    batch = first_batch(corpus)
    draws = Stage1Draws.sample(batch, config, RngFactory(0), 0, 0)
    model.stage1_losses(batch, draws, lam=0.0).total.backward()
    for grad in grads_under(model, "eclo."):
        assert grad is None or not np.any(grad)
    assert any(grad is not None and np.any(grad) for grad in grads_under(model, "dec."))


def test_draws_follow_the_sample_not_the_batch(config: Config, corpus: Corpus) -> None:
    samples = corpus.split("train")
    factory = RngFactory(7)
    together = Stage1Draws.sample(corpus.batch(samples[:2]), config, factory, 3, 0)
    alone = Stage1Draws.sample(corpus.batch(samples[1:2]), config, factory, 3, 5)
    assert together.prefix_lengths[1] == alone.prefix_lengths[0]
    assert together.gates[1] == alone.gates[0]
    assert np.array_equal(together.plans[1].masked, alone.plans[0].masked)


def test_stage_losses_need_the_matching_model(config: Config, corpus: Corpus) -> None:
    batch = first_batch(corpus)
    with pytest.raises(ConfigError):
        HTSCModel(config, 2).stage1_losses(batch, Stage1Draws.sample(batch, config, RngFactory(0), 0, 0))
    with pytest.raises(ConfigError):
        HTSCModel(config, 1).stage2_loss(batch)


def test_transfer_reports_every_parameter(config: Config) -> None:
    _, stage2, report = transferred_pair(config)
    assert sorted(report.copied) == sorted(stage2.shared_names())
    assert sorted(report.fresh) == sorted(stage2.fresh_names())
    assert report.dropped and all(name.startswith("eclo.") for name in report.dropped)


def test_fresh_stage2_reproduces_stage1_generation(config: Config, corpus: Corpus) -> None:
    stage1, stage2, _ = transferred_pair(config)
    batch = first_batch(corpus)
    before = stage1.logits(stage1.encode(batch.images), batch.tokens).data
    after = stage2.logits(stage2.encode(batch.images), batch.tokens).data
    assert np.max(np.abs(before - after)) <= 1e-5
    assert stage2.stage2_loss(batch).value == pytest.approx(stage1.teacher_forced_nll(batch).item(), rel=1e-5)


def test_mediator_switches(make_config, corpus: Corpus) -> None:
    batch = first_batch(corpus)
    model = HTSCModel(make_config(mediators__vdm=False), 2)
    encoding = model.enc.vis.encode_image(batch.images)
    visual, language = model.mediators(encoding)
    assert visual is None
    assert language.shape == (batch.size, model.vdm.k, 16)

    both = HTSCModel(make_config(), 2)
    visual, language = both.mediators(both.enc.vis.encode_image(batch.images))
    assert visual.shape == language.shape == (batch.size, 2, 16)
    assert HTSCModel(make_config(), 1).mediators(encoding) == (None, None)


def test_stage2_gradient_reaches_every_mediator(config: Config, corpus: Corpus) -> None:
    _, stage2, _ = transferred_pair(config)
    batch = first_batch(corpus)
    # The zero-initialised branch outputs still receive gradient
    stage2.stage2_loss(batch).total.backward()
    assert any(grad is not None and np.any(grad) for grad in grads_under(stage2, "fuse.branches"))
    assert any(grad is not None and np.any(grad) for grad in grads_under(stage2, "enc."))


def test_context_selection_and_next_token_distribution(config: Config, corpus: Corpus) -> None:
    model = HTSCModel(config, 2)
    batch = first_batch(corpus)
    context = model.encode(batch.images)
    single = context.select(1)
    assert single.features.shape == (1, 16, 16)
    assert single.visual.shape[0] == 1
    tiled = single.repeat(3)
    assert tiled.features.shape == (3, 16, 16)
    assert np.array_equal(tiled.features.data[2], context.features.data[1])
    log_probs = model.next_log_probs(tiled, np.array([[1], [1], [1]]))
    assert log_probs.shape == (3, 32)
    assert np.allclose(np.exp(log_probs).sum(axis=-1), 1.0)
    assert np.allclose(log_probs[0], log_probs[2])


def test_stage1_objective_gradient(config: Config, corpus: Corpus) -> None:
    model = HTSCModel(config, 1, np.random.default_rng(3), dtype=np.float64)
    batch = first_batch(corpus, 2)
    params = dict(model.named_parameters())

    def objective():
        # Fresh draws each call so the negatives stay fixed
        return model.stage1_losses(batch, Stage1Draws.sample(batch, config, RngFactory(0), 0, 0)).total

    inputs = [params["enc.vis.stem.bias"], params["eclo.exist.bias"], params["eclo.loc.bias"], params["dec.vocab_head.bias"], params["dec.norm.gamma"]]
    assert gradcheck(objective, inputs).passed


def test_stage2_objective_gradient(config: Config, corpus: Corpus) -> None:
    model = HTSCModel(config, 2, np.random.default_rng(4), dtype=np.float64)
    rng = np.random.default_rng(5)
    # Open the side branches so every mediator reaches the loss
    for branch in model.fuse.branches:
        branch.attn.o.weight.data[...] = rng.normal(0.0, 0.3, size=branch.attn.o.weight.shape)
    batch = first_batch(corpus, 2)
    params = dict(model.named_parameters())
    inputs = [
        params["enc.vis.stem.bias"],
        params["vdm.ffn.fc2.bias"],
        params["ldm.ffn.fc2.bias"],
        params["fuse.visual_queries"],
        params["fuse.branches.0.ln.beta"],
        params["dec.vocab_head.bias"],
    ]
    result = gradcheck(lambda: model.stage2_loss(batch).total, inputs)
    assert result.passed
    assert all(np.any(grad) for grad in result.analytic)
