"""Tests for the attention recognizer, its training loop and checkpoints."""

import math

import numpy as np
import pytest

from kforge.config import Hyperparams
from kforge.curriculum import StopRule
from kforge.errors import (
    CorruptArtifactError,
    DivergenceError,
    FormatVersionError,
    ImageTooLargeError,
    LoadError,
    ShapeError,
    UnknownTokenError,
)
from kforge.imaging import write_png
from kforge.models import CurriculumManifest, ManifestEntry, SampleKind
from kforge.nn import positional_encoding
from kforge.recognizer import (
    EOS,
    GRAD_CHECK_TOLERANCE,
    SEP,
    SOS,
    AttentionMap,
    FeatureGrid,
    ModelParams,
    Recognizer,
    RecognizerTrainer,
    Vocabulary,
    grad_check,
    load_params,
    locate_from_attention,
    prepare_image,
    read_characters,
    save_params,
    toy_problem,
    train,
)

UNIT = dict(conv_channels=(1, 1), feature_dim=1, pos_dims=0, embed_dim=1, hidden_dim=1, attn_dim=1, max_side=64)


@pytest.fixture
def small_hp():
    return Hyperparams(conv_channels=(2, 3), feature_dim=4, pos_dims=4, embed_dim=4, hidden_dim=4,
                       attn_dim=4, max_side=128, batch_size=2, max_decode_len=4, seed=1)


@pytest.fixture
def vocab():
    return Vocabulary(["a", "b"])


@pytest.fixture
def always_a():
    """Unit-sized model that emits 'a' at every step with uniform attention."""
    params = ModelParams.zeros(Hyperparams(**UNIT), Vocabulary(["a"]))
    params.tensors["emb.E"][:, 0] = 1.0
    params.tensors["out.W"][4, 0] = 1.0
    return params


@pytest.fixture
def samples(tmp_path):
    """Two tiny crops on disk with their entries."""
    rng = np.random.default_rng(3)
    entries = []
    for i, text in enumerate(["ab", "ba"]):
        path = tmp_path / f"s{i}.png"
        write_png(path, rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8))
        entries.append(ManifestEntry(sample_id=f"s{i}", kind=SampleKind.MULTILINE_CROP,
                                     image_path=str(path), transcript=text))
    return entries


def test_vocabulary_encoding(vocab):
    assert vocab.tokens == ["<pad>", "<sos>", "<eos>", "<sep>", "a", "b"]
    assert vocab.encode("a\nb") == [4, SEP, 5]
    assert vocab.decode([4, SEP, 5, EOS]) == "a\nb"
    with pytest.raises(UnknownTokenError, match="'c'"):
        vocab.encode("ac")
    with pytest.raises(ValueError):
        Vocabulary(["<eos>"])


def test_vocabulary_from_transcripts():
    vocab = Vocabulary.from_transcripts(["ba\nc", "a"])

    assert vocab.symbols == ["a", "b", "c"]
    assert vocab.missing(["abz\n", "y"]) == ["y", "z"]


def test_init_biases(small_hp, vocab):
    params = ModelParams.init(small_hp, vocab)

    assert params.tensors["lstm.b"].tolist() == [0.0] * 4 + [1.0] * 4 + [0.0] * 8
    assert not params.tensors["att.b"].any()
    assert params.tensors["emb.E"].shape == (6, 4)
    again = ModelParams.init(small_hp, vocab)
    assert all(np.array_equal(params.tensors[k], again.tensors[k]) for k in params.tensors)


def test_encoder_grid_shape(small_hp, vocab):
    """Test that a 128x128 image gives a 16x16 grid with positional channels last."""
    model = Recognizer(ModelParams.init(small_hp, vocab), max_side=128)

    grid = model.encode(np.zeros((128, 128, 3), dtype=np.uint8))

    assert grid.values.shape == (16, 16, 8)
    assert grid.stride == (8, 8) and grid.image_size == (128, 128)
    np.testing.assert_allclose(grid.values[:, :, 4:], positional_encoding(16, 16, 4))


def test_encoder_grid_rounds_up(small_hp, vocab):
    grid = Recognizer(ModelParams.init(small_hp, vocab)).encode(np.zeros((17, 30, 3), dtype=np.uint8))

    assert (grid.rows, grid.cols) == (3, 4)


def test_zero_parameters_give_uniform_outputs(small_hp, vocab):
    model = Recognizer(ModelParams.zeros(small_hp, vocab))
    grid = model.encode(np.zeros((64, 64, 3), dtype=np.uint8))

    probs, _, amap = model.decode_step(SOS, model.initial_state(grid), grid)

    np.testing.assert_allclose(probs, np.full(6, 1 / 6))
    np.testing.assert_allclose(amap.weights, np.full((8, 8), 1 / 64))


def test_attention_map_is_a_distribution(small_hp, vocab):
    model = Recognizer(ModelParams.init(small_hp, vocab))
    grid = model.encode(np.random.default_rng(0).integers(0, 256, size=(40, 56, 3)).astype(np.uint8))

    _, amap = model.attend(model.initial_state(grid), grid)

    assert amap.weights.shape == (5, 7)
    assert amap.weights.sum() == pytest.approx(1.0)
    assert (amap.weights >= 0).all()


def test_decode_step_by_hand():
    """Test one step on a single-cell grid against values computed by hand."""
    params = ModelParams.zeros(Hyperparams(**UNIT), Vocabulary(["a"]))
    params.tensors["emb.E"][SOS, 0] = 1.0
    params.tensors["out.W"][4, 0] = 1.0
    params.tensors["out.W_c"][0, 0] = 1.0
    grid = FeatureGrid(values=np.array([[[2.0]]]), stride=(8, 8), image_size=(8, 8))
    model = Recognizer(params)

    probs, state, amap = model.decode_step(SOS, model.initial_state(grid), grid)

    # h = 0 with zero LSTM weights, the single cell gets all attention, so u = 1 + 2
    expected = np.exp([0.0, 0.0, 0.0, 0.0, 3.0])
    np.testing.assert_allclose(probs, expected / expected.sum())
    np.testing.assert_allclose(state.c, [2.0])
    np.testing.assert_allclose(state.h, [0.0])
    assert amap.weights.tolist() == [[1.0]]

    hot, _, _ = Recognizer(params, logit_scale=2.0).decode_step(SOS, model.initial_state(grid), grid)
    assert hot[4] == pytest.approx(math.exp(6) / (4 + math.exp(6)))


def test_decode_step_rejects_unknown_id(always_a):
    model = Recognizer(always_a)
    grid = model.encode(np.zeros((8, 8, 3), dtype=np.uint8))

    with pytest.raises(UnknownTokenError):
        model.decode_step(99, model.initial_state(grid), grid)


def test_greedy_decode_truncates(always_a):
    model = Recognizer(always_a)
    image = np.zeros((24, 24, 3), dtype=np.uint8)

    result = model.greedy_decode(image, max_len=3)

    assert result.tokens == [4, 4, 4]
    assert result.text == "aaa"
    assert result.truncated
    assert len(result.maps) == 3

    empty = model.greedy_decode(image, max_len=0)
    assert empty.tokens == [] and empty.truncated and empty.text == ""


def test_greedy_decode_stops_at_eos(always_a):
    always_a.tensors["out.W"][EOS, 0] = 2.0

    result = Recognizer(always_a).greedy_decode(np.zeros((24, 24, 3), dtype=np.uint8), max_len=5)

    assert result.tokens == [] and not result.truncated


def test_logit_scale_does_not_change_decoding(small_hp, vocab):
    params = ModelParams.init(small_hp, vocab, seed=5)
    image = np.random.default_rng(5).integers(0, 256, size=(32, 32, 3)).astype(np.uint8)

    plain = Recognizer(params).greedy_decode(image, max_len=6)
    hot = Recognizer(params, logit_scale=2.0).greedy_decode(image, max_len=6)

    assert plain.tokens == hot.tokens


def test_image_too_large(always_a):
    with pytest.raises(ImageTooLargeError, match="max side 32"):
        Recognizer(always_a, max_side=32).encode(np.zeros((40, 20, 3), dtype=np.uint8))


def test_prepare_image():
    image = np.zeros((50, 100, 3), dtype=np.uint8)

    small, scale = prepare_image(image, 32)
    same, one = prepare_image(image, 100)

    assert small.shape == (16, 32, 3)
    assert scale == pytest.approx(0.32)
    assert same is image and one == 1.0


def test_locate_from_attention():
    grid = FeatureGrid(values=np.zeros((8, 8, 1)), stride=(8, 8), image_size=(64, 64))
    weights = np.zeros((8, 8))
    weights[2, 3] = 1.0

    assert locate_from_attention(AttentionMap(weights), grid) == (28.0, 20.0)
    assert locate_from_attention(AttentionMap(np.full((8, 8), 1 / 64)), grid) == (4.0, 4.0)
    with pytest.raises(ValueError):
        locate_from_attention(AttentionMap(np.zeros((2, 2))), grid)


def test_locate_clips_to_image():
    grid = FeatureGrid(values=np.zeros((1, 4, 1)), stride=(8, 8), image_size=(27, 3))
    weights = np.zeros((1, 4))
    weights[0, 3] = 1.0

    assert locate_from_attention(AttentionMap(weights), grid) == (26.5, 2.5)


def test_read_characters_maps_points_back(always_a):
    """Test that points come back in original-image pixels after rescaling."""
    model = Recognizer(always_a, max_side=32)
    image = np.zeros((60, 100, 3), dtype=np.uint8)

    result, points = read_characters(model, image, {"a": 0x3042}, max_len=3)

    assert result.text == "aaa"
    assert len(points) == 3
    for point in points:
        assert point.codepoint == 0x3042
        assert (point.x, point.y) == pytest.approx((12.5, 12.5))


def test_gradients_match_finite_differences():
    params, image, transcript = toy_problem()

    assert grad_check(params, image, transcript) <= GRAD_CHECK_TOLERANCE


def test_grad_check_catches_wrong_gradient():
    params, image, transcript = toy_problem()

    def corrupt(grads):
        grads["out.W_c"] = grads["out.W_c"] * 2.0
        return grads

    assert grad_check(params, image, transcript, grad_hook=corrupt) > 1e-2


def test_checkpoint_round_trip(tmp_path, small_hp, vocab):
    params = ModelParams.init(small_hp, vocab)
    path = tmp_path / "model.ckpt"

    save_params(path, params, {"config": "abc"})
    loaded = load_params(path, expected=small_hp)

    assert loaded.vocab == vocab
    assert loaded.arch == params.arch
    assert sorted(loaded.tensors) == sorted(params.tensors)
    assert all(np.array_equal(loaded.tensors[k], params.tensors[k]) for k in params.tensors)
    assert path.read_bytes().startswith(b"#kforge-ckpt v1\n")


def test_checkpoint_shape_mismatch(tmp_path, small_hp, vocab):
    path = tmp_path / "model.ckpt"
    save_params(path, ModelParams.init(small_hp, vocab))
    wider = small_hp.model_copy(update={"hidden_dim": 5})

    with pytest.raises(ShapeError, match="att.wa"):
        load_params(path, expected=wider)


def test_checkpoint_guards(tmp_path, small_hp, vocab):
    path = tmp_path / "model.ckpt"
    save_params(path, ModelParams.init(small_hp, vocab))
    data = path.read_bytes()

    flipped = tmp_path / "flipped.ckpt"
    flipped.write_bytes(data[:-1] + bytes([data[-1] ^ 0xFF]))
    with pytest.raises(CorruptArtifactError, match="checksum"):
        load_params(flipped)

    foreign = tmp_path / "v2.ckpt"
    foreign.write_bytes(b"#kforge-ckpt v2\n{}\n")
    with pytest.raises(FormatVersionError):
        load_params(foreign)

    with pytest.raises(LoadError):
        load_params(tmp_path / "missing.ckpt")


def test_train_runs_and_logs(samples, small_hp):
    manifest = CurriculumManifest(stage=1, entries=samples)

    result = train(manifest, samples, small_hp, stop=StopRule(patience=5), max_epochs=2)

    assert [(log.stage, log.epoch) for log in result.log] == [(1, 1), (1, 2)]
    assert result.params.vocab.symbols == ["a", "b"]
    assert all(math.isfinite(log.loss) for log in result.log)


def test_train_is_deterministic(samples, small_hp):
    manifest = CurriculumManifest(stage=1, entries=samples)

    a = train(manifest, samples, small_hp, max_epochs=2)
    b = train(manifest, samples, small_hp, max_epochs=2)

    assert all(np.array_equal(a.params.tensors[k], b.params.tensors[k]) for k in a.params.tensors)


def test_train_schedule_warm_starts(samples, small_hp):
    stages = [CurriculumManifest(stage=1, entries=samples[:1]), CurriculumManifest(stage=2, entries=samples)]

    result = train(stages, samples, small_hp, max_epochs=1)

    assert [s.stage for s in result.stages] == [1, 2]
    assert [log.stage for log in result.log] == [1, 2]


def test_train_rejects_vocabulary_gaps(samples, small_hp):
    init = ModelParams.init(small_hp, Vocabulary(["a"]))

    with pytest.raises(UnknownTokenError, match="'b'"):
        train(CurriculumManifest(stage=1, entries=samples), samples, small_hp, init=init)


def test_trainer_clips_updates(samples, small_hp, vocab):
    hp = small_hp.model_copy(update={"clip_norm": 0.01})
    trainer = RecognizerTrainer(Recognizer(ModelParams.init(hp, vocab)), hp)

    trainer.train_epoch(samples, epoch_seed=0, epoch=1)

    assert len(trainer.update_norms) == 1
    assert trainer.update_norms[0] <= 0.01


def test_trainer_loads_relative_paths(samples, small_hp, vocab, tmp_path):
    relative = [entry.model_copy(update={"image_path": f"s{i}.png"}) for i, entry in enumerate(samples)]
    trainer = RecognizerTrainer(Recognizer(ModelParams.init(small_hp, vocab)), small_hp, root=tmp_path)

    texts = trainer.transcribe(relative)

    assert len(texts) == 2


def test_trainer_raises_on_divergence(samples, small_hp, vocab, mocker):
    model = Recognizer(ModelParams.init(small_hp, vocab))
    zeros = {k: np.zeros_like(v) for k, v in model.params.tensors.items()}
    mocker.patch.object(model, "loss_and_grads", return_value=(float("nan"), zeros))
    trainer = RecognizerTrainer(model, small_hp)

    with pytest.raises(DivergenceError) as info:
        trainer.train_epoch(samples, epoch_seed=0, epoch=3)

    assert (info.value.epoch, info.value.batch) == (3, 1)


def test_trainer_snapshot_restore(small_hp, vocab):
    trainer = RecognizerTrainer(Recognizer(ModelParams.init(small_hp, vocab)), small_hp)
    snapshot = trainer.snapshot()

    trainer.model.params.tensors["out.W"] += 1.0
    trainer.restore(snapshot)

    assert np.array_equal(trainer.model.params.tensors["out.W"], snapshot["out.W"])
    assert trainer.model.params.tensors["out.W"] is not snapshot["out.W"]


def test_trainer_validation_loss_leaves_params_alone(samples, small_hp, vocab):
    trainer = RecognizerTrainer(Recognizer(ModelParams.init(small_hp, vocab)), small_hp)
    before = trainer.snapshot()

    loss = trainer.validation_loss(samples)

    assert math.isfinite(loss) and loss > 0
    assert all(np.array_equal(trainer.model.params.tensors[k], before[k]) for k in before)
    assert trainer.validation_loss([]) == 0.0


def test_train_with_loss_stop_rule_logs_validation_loss(samples, small_hp):
    manifest = CurriculumManifest(stage=1, entries=samples)

    result = train(manifest, samples, small_hp, stop=StopRule(patience=5, metric="valid_loss"), max_epochs=2)

    assert len(result.log) == 2
    assert all(math.isfinite(log.valid_loss) for log in result.log)


def test_single_sample_loss_falls(samples, small_hp, vocab):
    """Test that repeated updates on one crop drive its loss down."""
    hp = small_hp.model_copy(update={"scale": 1.0, "epsilon": 1e-2, "batch_size": 1})
    trainer = RecognizerTrainer(Recognizer(ModelParams.init(hp, vocab)), hp)

    losses = [trainer.train_epoch(samples[:1], epoch_seed=e, epoch=e) for e in range(1, 101)]

    assert losses[-1] < 0.5 * losses[0]
