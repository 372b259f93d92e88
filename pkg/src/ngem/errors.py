class NgemError(Exception):
    pass


class ConfigError(NgemError, ValueError):
    pass


class ShapeError(NgemError, ValueError):
    pass


class StateError(NgemError, RuntimeError):
    pass


class IngestError(NgemError, ValueError):
    pass
