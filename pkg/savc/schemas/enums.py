import enum


class Benchmark(str, enum.Enum):
    CIFAR100 = "cifar100"
    MINI_IMAGENET = "mini_imagenet"
    CUB200 = "cub200"
    SYNTHETIC = "synthetic"


class FantasySetName(str, enum.Enum):
    TWO_FOLD_ROTATIONS = "two_fold_rotations"
    FOUR_FOLD_ROTATIONS = "four_fold_rotations"
    TWELVE_AUGMENTATIONS = "twelve_augmentations"
    CUSTOM = "custom"


class ChannelPermutation(str, enum.Enum):
    RGB = "RGB"
    GBR = "GBR"
    BRG = "BRG"


class AblationToggle(str, enum.Enum):
    SCL = "scl"
    FANTASY = "fantasy"
    MULTICROP = "multicrop"
    FINETUNE = "finetune"


class ViewRole(str, enum.Enum):
    QUERY_ONLY = "query_only"
