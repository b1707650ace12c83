from enum import Enum


class Stage(Enum):
    SFT = "sft"
    PROCESSOR = "processor"


class Schedule(Enum):
    CONSTANT = "constant"
    WARMUP_COSINE = "warmup-cosine"


class TriggerMode(Enum):
    NONE = "none"
    NEWLINE = "newline"
    EVERY_R = "every_R"


class BaselineKind(Enum):
    PAUSE = "pause"
    LATENT_ROLLOUT = "latent_rollout"


class SweepAxis(Enum):
    K = "k"
    R = "R"
    FF = "ff"


class Command(Enum):
    GEN_DATA = "gen-data"
    TRAIN_BACKBONE = "train-backbone"
    TRAIN_PROCESSOR = "train-processor"
    EVAL = "eval"
    ABLATE_K = "ablate-k"
    ABLATE_RSW = "ablate-rsw"
    ABLATE_SIZE = "ablate-size"
    EPOCH_MATCHED = "epoch-matched"
    INSTRUMENT = "instrument"
    IB_VERIFY = "ib-verify"
