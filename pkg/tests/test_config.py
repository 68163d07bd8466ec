import pydantic
import pytest

from promptcompvl.autodiff import LrSchedule, OptimizerKind
from promptcompvl.config import RunConfig, load_config_file, resolve_config
from promptcompvl.data import CzslSetting, Phase
from promptcompvl.errors import ConfigurationError
from promptcompvl.prompt import PromptInit, PromptMode


@pytest.fixture
def cfg_file(tmp_path):
    def write(text):
        path = tmp_path / 'run.cfg'
        path.write_text(text)
        return path
    return write


# ── defaults and precedence ───────────────────────────────────────────────────

def test_defaults():
    cfg = resolve_config()
    assert cfg.mode is PromptMode.PROMPTCOMPVL
    assert cfg.tau == 0.01
    assert cfg.prompt_length == 3
    assert (cfg.width, cfg.blocks, cfg.heads, cfg.context_length) == (64, 2, 4, 8)
    assert cfg.optimizer is OptimizerKind.SGD
    assert cfg.setting is CzslSetting.GENERALIZED
    assert cfg.phase is Phase.TEST
    assert cfg.feasibility_threshold is None


def test_file_then_flags(cfg_file):
    path = cfg_file(
        '# training run\n'
        'epochs = 5\n'
        'learning-rate = 0.1   # dashes read as underscores\n'
        'optimizer = adam\n'
        '\n'
        'mode = coop_soft_prompt\n'
    )
    cfg = resolve_config(path, {'epochs': 7, 'seed': None, 'schedule': 'cosine'})
    assert cfg.epochs == 7
    assert cfg.learning_rate == 0.1
    assert cfg.optimizer is OptimizerKind.ADAM
    assert cfg.schedule is LrSchedule.COSINE
    assert cfg.mode is PromptMode.COOP_SOFT_PROMPT
    assert cfg.seed == 0


def test_none_string_clears_a_value(cfg_file):
    path = cfg_file('feasibility_threshold = 0.4\nout = none\n')
    assert resolve_config(path).feasibility_threshold == 0.4
    assert resolve_config(path, {'feasibility_threshold': 'none'}).feasibility_threshold is None
    assert resolve_config(path).out is None


def test_bool_and_enum_coercion(cfg_file):
    cfg = resolve_config(cfg_file('causal = false\nprompt_init = hard\nselect_best = true\n'))
    assert cfg.causal is False
    assert cfg.prompt_init is PromptInit.HARD
    assert cfg.select_best is True


# ── config file errors ────────────────────────────────────────────────────────

def test_unknown_key_names_file_and_line(cfg_file):
    path = cfg_file('epochs = 3\n\nlearning_rat = 0.1\n')
    with pytest.raises(ConfigurationError, match=r'run\.cfg:3: unknown key'):
        load_config_file(path)


def test_repeated_key(cfg_file):
    with pytest.raises(ConfigurationError, match=':2:'):
        load_config_file(cfg_file('seed = 1\nseed = 2\n'))


def test_malformed_line(cfg_file):
    with pytest.raises(ConfigurationError, match='expected key=value'):
        load_config_file(cfg_file('epochs 3\n'))


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        resolve_config(tmp_path / 'absent.cfg')


# ── validation ────────────────────────────────────────────────────────────────

@pytest.mark.parametrize('overrides, field', [
    ({'tau': 0.0}, 'tau'),
    ({'epochs': 0}, 'epochs'),
    ({'learning_rate': -1.0}, 'learning_rate'),
    ({'mode': 'zero_shot'}, 'mode'),
    ({'optimizer': 'rmsprop'}, 'optimizer'),
    ({'seed': 'abc'}, 'seed'),
    ({'unknown_flag': 1}, 'unknown_flag'),
])
def test_invalid_values(overrides, field):
    with pytest.raises(ConfigurationError, match=field):
        resolve_config(overrides=overrides)


def test_prompt_must_fit_context_length():
    with pytest.raises(ConfigurationError, match='prompt_length 5'):
        resolve_config(overrides={'prompt_length': 5})
    assert resolve_config(overrides={'prompt_length': 5, 'context_length': 9}).prompt_length == 5


def test_heads_must_divide_width():
    with pytest.raises(ConfigurationError, match='divide'):
        resolve_config(overrides={'heads': 3})


def test_config_is_frozen():
    cfg = resolve_config()
    with pytest.raises(pydantic.ValidationError):
        cfg.epochs = 3


# ── derived configs and echo ──────────────────────────────────────────────────

def test_echo_is_sorted_and_excludes_paths():
    a = resolve_config(overrides={'data_dir': '/a', 'out': '/a/run', 'log_level': 'DEBUG'})
    b = resolve_config(overrides={'data_dir': '/b', 'checkpoint': '/b/final.ckpt'})
    assert a.echo() == b.echo()
    lines = a.echo().splitlines()
    keys = [line.split('=', 1)[0] for line in lines]
    assert keys == sorted(keys)
    assert 'data_dir' not in keys and 'out' not in keys
    assert 'mode=promptcompvl' in lines
    assert 'causal=true' in lines
    assert 'feasibility_threshold=none' in lines


def test_echo_changes_with_model_settings():
    assert resolve_config().echo() != resolve_config(overrides={'tau': 0.02}).echo()


def test_train_config_carries_echo():
    cfg = resolve_config(overrides={'epochs': 4, 'optimizer': 'adam', 'seed': 3})
    train = cfg.train_config()
    assert train.epochs == 4
    assert train.optimizer is OptimizerKind.ADAM
    assert train.seed == 3
    assert train.config_echo == cfg.echo()


def test_encoder_and_synth_configs():
    cfg = RunConfig(width=32, heads=2, image_dim=16, attrs=3, objs=4, unseen_frac=0.5, seed=7)
    dims = cfg.encoder_dims()
    assert (dims.width, dims.heads, dims.image_dim, dims.causal) == (32, 2, 16, True)
    assert cfg.encoder_dims(image_dim=5).image_dim == 5
    synth = cfg.synth_config()
    assert (synth.num_attrs, synth.num_objs, synth.unseen_fraction, synth.seed) == (3, 4, 0.5, 7)
