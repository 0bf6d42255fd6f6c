"""Exception types raised across the back-end."""


class CollabSlamError(Exception):
    pass


class DescriptorTypeMismatch(CollabSlamError):
    pass


# place recognition
class InsufficientCorpus(CollabSlamError):
    pass


class DuplicateKeyframe(CollabSlamError):
    pass


class VocabularyFormatError(CollabSlamError):
    pass


# relative pose
class InsufficientNeighbors(CollabSlamError):
    pass


class SetRejected(CollabSlamError):
    def __init__(self, message, pair=None, inliers=0):
        super().__init__(message)
        self.pair = pair
        self.inliers = inliers


class DegenerateConfiguration(CollabSlamError):
    pass


class VerificationFailed(CollabSlamError):
    def __init__(self, message, inliers=0):
        super().__init__(message)
        self.inliers = inliers


class DegenerateSamples(CollabSlamError):
    pass


class CorruptJobFile(CollabSlamError):
    pass


# pose graph
class DuplicateNode(CollabSlamError):
    pass


class NotConnected(CollabSlamError):
    pass


class NonPSDInformation(CollabSlamError):
    pass


# map manager
class LoopTooRecent(CollabSlamError):
    pass


class DuplicateLoop(CollabSlamError):
    pass


class SameMap(CollabSlamError):
    pass


# wire protocol
class ProtocolError(CollabSlamError):
    pass


class TooManyKeypoints(ProtocolError):
    pass


class BadMagic(ProtocolError):
    pass


class UnsupportedVersion(ProtocolError):
    pass


class LengthMismatch(ProtocolError):
    pass


class InvariantViolation(ProtocolError):
    def __init__(self, field, message=""):
        super().__init__(f"{field}: {message}" if message else field)
        self.field = field


# evaluation / simulator / server
class InsufficientOverlap(CollabSlamError):
    pass


class InvalidScenario(CollabSlamError):
    def __init__(self, field, message=""):
        super().__init__(f"{field}: {message}" if message else field)
        self.field = field


class ConnectionLost(CollabSlamError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class BindFailure(CollabSlamError):
    pass
