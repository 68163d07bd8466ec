import pytest

from promptcompvl.errors import (
    AllMaskedError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    ConfigurationError,
    ContractError,
    CzslError,
    DataValidationError,
    DegenerateInputError,
    DimensionError,
    FeatureLookupError,
    GenerationError,
    TapeStateError,
)


@pytest.mark.parametrize('cls, builtin', [
    (DimensionError, ValueError),
    (DegenerateInputError, ValueError),
    (AllMaskedError, ValueError),
    (ContractError, ValueError),
    (TapeStateError, RuntimeError),
    (ConfigurationError, ValueError),
    (DataValidationError, ValueError),
    (GenerationError, ValueError),
    (FeatureLookupError, KeyError),
    (CheckpointIntegrityError, ValueError),
    (CheckpointVersionError, CheckpointIntegrityError),
])
def test_hierarchy(cls, builtin):
    assert issubclass(cls, CzslError)
    assert issubclass(cls, builtin)


def test_dimension_error_renders_shapes():
    exc = DimensionError('matmul', (2, 3), (4,))
    assert str(exc) == 'matmul: incompatible shapes 2x3 and 4'
    assert exc.shapes == ((2, 3), (4,))


def test_dimension_error_scalar_shape():
    assert 'scalar' in str(DimensionError('sum', ()))


def test_data_validation_error_location():
    assert str(DataValidationError('bad')) == 'bad'
    assert str(DataValidationError('bad', '/d/train_pairs.txt')) == '/d/train_pairs.txt: bad'
    exc = DataValidationError('bad', '/d/train_pairs.txt', 7)
    assert str(exc) == '/d/train_pairs.txt:7: bad'
    assert exc.lineno == 7


def test_feature_lookup_error_message_is_unquoted():
    exc = FeatureLookupError('image id', 'img_9')
    assert str(exc) == "unknown image id: 'img_9'"
    assert exc.key == 'img_9'


def test_checkpoint_errors_name_the_record():
    exc = CheckpointIntegrityError('prompt/theta', 'truncated')
    assert exc.record == 'prompt/theta'
    assert 'prompt/theta' in str(exc)

    version = CheckpointVersionError(3, 1)
    assert version.record == 'header'
    assert (version.found, version.expected) == (3, 1)


def test_row_errors_carry_the_row():
    assert AllMaskedError(4).row == 4
    degenerate = DegenerateInputError(2, 0.0)
    assert degenerate.row == 2
    assert 'row 2' in str(degenerate)
