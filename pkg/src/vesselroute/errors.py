"""Exception hierarchy shared by all modules."""


class VesselRouteError(Exception):
    """Base class for every error raised by the package."""


class InvalidParameter(VesselRouteError, ValueError):
    pass


class InvalidInput(VesselRouteError, ValueError):
    pass


class UnboundedDistance(VesselRouteError, ValueError):
    """Distance transform requested on a mask without background."""


class IntegrityError(VesselRouteError):
    """Inputs are individually valid but mutually inconsistent."""


class ParseError(VesselRouteError, ValueError):
    pass


class LoadError(VesselRouteError):
    pass


class LookupFailure(VesselRouteError, KeyError):
    pass


class NoPathError(VesselRouteError):
    pass


class GenerationError(VesselRouteError):
    pass


class EvaluationError(VesselRouteError):
    pass
