# coding: utf-8

# exit codes of the command line tool
EXIT_SCHEMA = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class BEVPromptException(Exception):
    exit_code = EXIT_NUMERIC


class SchemaException(BEVPromptException):
    exit_code = EXIT_SCHEMA


class ConfigurationException(BEVPromptException):
    exit_code = EXIT_SCHEMA


class LabelException(BEVPromptException):
    exit_code = EXIT_SCHEMA


class DataException(BEVPromptException):
    exit_code = EXIT_SCHEMA


class DimensionException(BEVPromptException):

    def __init__(self, op, *shapes):
        shapes = ' vs '.join(str(tuple(s)) for s in shapes)
        super(DimensionException, self).__init__(
            '{:s}: incompatible shapes {:s}'.format(op, shapes))
        self.op = op


class EvaluationException(BEVPromptException):
    pass


class GeometryException(BEVPromptException):
    pass


class BehindCameraException(GeometryException):
    pass


class OffImageException(GeometryException):
    pass


class GenerationException(BEVPromptException):
    pass


class TrainingAbortedException(BEVPromptException):
    pass


class EmptyPromptException(BEVPromptException):
    pass
