"""Shared fixtures: synthetic corpora, trained tokenizers, desk-scale model.

Session scope keeps tokenizer training and the ablation trainings to one
run across the whole suite; the ablation backbone is reused by the
overfit-sanity fixture.
"""

from __future__ import annotations

import logging
import math
from dataclasses import replace

import numpy as np
import pytest

from arascript import data as dt
from arascript import evaluation as ev
from arascript import model as md
from arascript import orthography as orth
from arascript import tokenization as tok
from arascript import training as tr

logging.getLogger("arascript").setLevel(logging.WARNING)
logging.getLogger("arascript.tokenization").setLevel(logging.ERROR)
logging.getLogger("arascript.model").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def table() -> orth.VariantTable:
    return orth.default_variant_table()


@pytest.fixture(scope="session")
def profile() -> orth.ScriptProfile:
    return orth.default_script_profile()


@pytest.fixture(scope="session")
def gen_cfg() -> dt.GeneratorConfig:
    return dt.GeneratorConfig(docs_per_class=30, doc_length=(6, 11),
                              keyword_rate=0.42, variant_rate=0.35)


@pytest.fixture(scope="session")
def labeled_docs(gen_cfg) -> list[dt.Document]:
    return dt.synth_corpus(gen_cfg, seed=42)


@pytest.fixture(scope="session")
def pretrain_docs(gen_cfg) -> list[dt.Document]:
    return dt.synth_corpus(replace(gen_cfg, docs_per_class=40), seed=99)


@pytest.fixture(scope="session")
def corpus_texts(pretrain_docs, table) -> list[str]:
    return [orth.normalize(d.text, d.language, table) for d in pretrain_docs]


@pytest.fixture(scope="session")
def tokenizers(corpus_texts):
    bpe = tok.train_bpe(corpus_texts, 350)
    wp = tok.train_wordpiece(corpus_texts, 350)
    return bpe, wp


@pytest.fixture(scope="session")
def desk_config(tokenizers) -> md.ModelConfig:
    bpe, wp = tokenizers
    return md.ModelConfig.desk(
        vocab_bpe=bpe.size, vocab_wp=wp.size,
        classes={lang: 3 for lang in orth.LanguageId})


@pytest.fixture(scope="session")
def desk_params(desk_config) -> md.ModelParameters:
    return md.init_parameters(desk_config, seed=0)


@pytest.fixture(scope="session")
def _ablation(labeled_docs, pretrain_docs, desk_config, tokenizers, table):
    """Three variants x three seeds, shared by the directional criteria.

    Pre-training runs long enough to cross the desk-scale dip where
    masked-token learning starts paying off downstream.
    """
    bpe, wp = tokenizers
    train_docs, _, test_docs = dt.split(
        labeled_docs, dt.SplitSpec(test_fraction=0.25, val_fraction=0.0,
                                   seed=0))
    pre_cfg = tr.PretrainConfig(epochs=90, batch_size=16, lr=2.2e-3, seed=7)
    fine_cfg = tr.FinetuneConfig(epochs=40, batch_size=16, lr=1e-2,
                                 patience=40, seed=0)
    variants = [
        ev.AblationVariant("scratch", pretrained=False),
        ev.AblationVariant("full"),
        ev.AblationVariant("plain", orth_weight=0.0, kl_weight=0.0),
    ]
    cache: dict = {}
    report = ev.ablation_run(variants, pretrain_docs, train_docs, test_docs,
                             desk_config, pre_cfg, fine_cfg, seeds=[0, 1, 2],
                             bpe=bpe, wp=wp, table=table,
                             backbone_cache=cache)
    return report, cache


@pytest.fixture(scope="session")
def ablation_report(_ablation) -> ev.EvalReport:
    return _ablation[0]


@pytest.fixture(scope="session")
def overfit_setup(_ablation, desk_config, tokenizers, table):
    """200-document separable task fine-tuned from the shared pre-trained
    backbone; returns (train accuracy, uniform-baseline log loss, classes)."""
    bpe, wp = tokenizers
    _, cache = _ablation
    classes = 2
    gen = dt.GeneratorConfig(languages=(orth.LanguageId.KURDISH,),
                             classes=classes, docs_per_class=100,
                             doc_length=(4, 7), keyword_rate=0.6,
                             variant_rate=0.2)
    docs = dt.synth_corpus(gen, seed=11)
    assert len(docs) == 200
    cfg = replace(desk_config, classes={orth.LanguageId.KURDISH: classes})
    params = md.init_parameters(cfg, seed=7)
    backbone = cache[(0.5, False)]
    for name in params.backbone_names():
        params[name].values[...] = backbone[name]
    fine_cfg = tr.FinetuneConfig(epochs=30, batch_size=16, lr=1e-2,
                                 patience=30, seed=0)
    tr.finetune(docs, fine_cfg, params, bpe, wp, table)
    correct = 0
    for d in docs:
        text = orth.normalize(d.text, d.language, table)
        enc = tok.encode_aligned(text, bpe, wp, max_len=cfg.max_len)
        probs = md.classify_tokens(enc, d.language, params).values.reshape(-1)
        correct += int(np.argmax(probs)) == d.label
    uniform = np.full(classes, 1.0 / classes)
    _, baseline = ev.evaluate([(uniform, d.label) for d in docs])
    return correct / len(docs), baseline.log_loss, classes
