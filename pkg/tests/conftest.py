import datetime

import pytest

from kyoto_shift_bench.config import ModelConfig, SchemaDescriptor, SplitConfig, SyntheticConfig
from kyoto_shift_bench.ingest import generate_synthetic
from kyoto_shift_bench.protocol import plan_splits
from kyoto_shift_bench.schema import NORMAL, RawRecord
from kyoto_shift_bench.tokenize import build_vocabulary


def make_record(**overrides) -> RawRecord:
    """A valid record with every field settable by keyword."""
    values = dict(
        duration=1.5,
        service="http",
        src_bytes=200,
        dst_bytes=3000,
        count=3,
        same_srv_rate=0.5,
        serror_rate=0.0,
        srv_serror_rate=0.0,
        dst_host_count=10,
        dst_host_srv_count=20,
        dst_host_same_src_port_rate=0.25,
        dst_host_serror_rate=0.0,
        dst_host_srv_serror_rate=0.0,
        flag="SF",
        timestamp=datetime.datetime(2007, 3, 4, 5, 6, 7),
        label=NORMAL,
    )
    values.update(overrides)
    return RawRecord(**values)


@pytest.fixture
def record_factory():
    return make_record


@pytest.fixture
def schema():
    return SchemaDescriptor()


@pytest.fixture
def synth_config():
    """Six small years: three to train on, two near, one far past the swap."""
    return SyntheticConfig(normals_per_month=60, seed=7)


@pytest.fixture
def corpus(synth_config):
    return generate_synthetic(synth_config)


@pytest.fixture
def split_config():
    return SplitConfig(
        train_years=[2006, 2007, 2008],
        near_years=[2009, 2010],
        far_years=[2011],
        normals_per_month_train=40,
        normals_per_month_iid=5,
        seed=3,
    )


@pytest.fixture
def splits(corpus, split_config):
    return plan_splits(corpus, split_config)


@pytest.fixture
def vocab(splits):
    return build_vocabulary(splits.train_records)


@pytest.fixture
def toy_model_config():
    """A tiny deterministic encoder that trains in well under a second."""
    return ModelConfig(
        n_layers=1,
        hidden=8,
        intermediate=16,
        n_heads=2,
        dropout=0.0,
        attention_dropout=0.0,
        batch_size=32,
        epochs=2,
        eval_mask_samplings=2,
        show_progress=False,
    )
