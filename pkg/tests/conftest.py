import numpy as np
import pytest

from surgimap.corpus import SynthSpec, generate_synthetic, make_folds, save_manifest, write_hsaf
from surgimap.encoder import SyntheticProvider
from surgimap.model import init_state, save_checkpoint
from surgimap.taxonomy import default_registry
from surgimap.tokenizer import build_vocab, save_vocab
from surgimap.trainer import TrainConfig, suggested_model_config, train


@pytest.fixture(scope="session")
def registry():
    return default_registry


@pytest.fixture(scope="session")
def vocab(registry):
    return build_vocab(registry.schemas())


@pytest.fixture(scope="session")
def corpus_world(registry):
    """Small, well-separated synthetic corpus covering all four tasks."""
    spec = SynthSpec(n_videos=10, clips_per_video=100, tasks=(2, 3),
                     feature_dim=32, class_separation=4.0, noise_sd=0.3, seed=11)
    records, features = generate_synthetic(spec)
    provider = SyntheticProvider(spec)
    folds = make_folds(records, seed=0)
    return {
        "spec": spec,
        "records": records,
        "features": features,
        "provider": provider,
        "folds": folds,
    }


@pytest.fixture(scope="session")
def trained(corpus_world, vocab, registry, tmp_path_factory):
    """One trained checkpoint shared by inference / workflow / service tests."""
    world = corpus_world
    fold = world["folds"][0]
    mcfg = suggested_model_config(vocab, registry, embed_dim=32, n_heads=4,
                                  feature_dim=world["spec"].feature_dim)
    state = init_state(mcfg, seed=3)
    tcfg = TrainConfig(epochs=150, batch_size=64, lr_base=1e-3,
                       warmup_epochs=2, seed=3)
    _, state = train(state, fold, (2, 3), tcfg, world["provider"],
                     vocab, registry, evaluate=False)

    out = tmp_path_factory.mktemp("trained")
    ckpt = out / "checkpoint.smckpt"
    vocab_path = out / "vocab.txt"
    manifest = out / "manifest.jsonl"
    features_path = out / "synthetic.hsaf"
    save_checkpoint(state, ckpt)
    save_vocab(vocab, vocab_path)
    save_manifest(world["records"], manifest)
    write_hsaf(features_path, world["features"])
    return {
        "state": state,
        "fold": fold,
        "checkpoint": ckpt,
        "vocab_path": vocab_path,
        "manifest": manifest,
        "features_path": features_path,
        "dir": out,
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
