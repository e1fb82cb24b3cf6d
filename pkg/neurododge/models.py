from pydantic import BaseModel, Field, field_validator, model_validator, ConfigDict
from typing import Optional, List, Tuple, Dict, Any
from enum import Enum


class ObjectKind(str, Enum):
    DISK = "disk"
    TALL_BLOB = "tall-blob"


class LayerKind(str, Enum):
    AVG_POOL = "AvgPool"
    CONV = "Conv"
    FC = "FC"


class EvalMode(str, Enum):
    ASYNC = "async"
    SYNC = "sync"
    EF_SNN = "ef-snn"


class Lighting(str, Enum):
    INDOOR_NORMAL = "indoor-normal"
    INDOOR_LOW = "indoor-low"
    OUTDOOR_NORMAL = "outdoor-normal"
    OUTDOOR_LOW = "outdoor-low"


class Optimizer(str, Enum):
    ADAM = "adam"
    SGD = "sgd"


class ReportFormat(str, Enum):
    JSON = "json"
    CSV = "csv"
    MARKDOWN = "markdown"


class SceneConfig(BaseModel):
    """One synthetic approach: an object sweeping across the sensor"""
    model_config = ConfigDict(
        extra='forbid',
        json_schema_extra={
            "example": {
                "kind": "disk",
                "start": [40.0, 64.0],
                "end": [88.0, 64.0],
                "radius": 6.0,
                "direction": 0,
                "threshold": 0.2,
                "noise_rate": 0.0,
                "seed": 7
            }
        }
    )

    kind: ObjectKind = ObjectKind.DISK
    start: Tuple[float, float] = Field(..., description="Start position (x, y) in pixels")
    end: Tuple[float, float] = Field(..., description="End position (x, y) in pixels")
    radius: float = Field(default=6.0, gt=0, description="Object radius in pixels")
    end_radius: Optional[float] = Field(default=None, gt=0, description="Radius at the end of the window")
    direction: int = Field(default=0, ge=0, le=1, description="0 = from-left, 1 = from-right")
    threshold: float = Field(default=0.2, gt=0, description="Contrast threshold in log intensity")
    contrast: float = Field(default=0.35, description="Object log-intensity step; negative for a dark object")
    noise_rate: float = Field(default=0.0, ge=0, description="Background noise in events/pixel/s")
    seed: int = 0
    window_ms: float = Field(default=50.0, gt=0)
    width: int = Field(default=128, ge=1, le=32767)
    height: int = Field(default=128, ge=1, le=65535)
    render_step_us: int = Field(default=250, ge=1, description="Sampling interval of the intensity model")

    @field_validator('contrast')
    @classmethod
    def validate_contrast(cls, v):
        if v == 0:
            raise ValueError("Contrast must be non-zero")
        return v


class KepConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    radius: float = Field(default=0.35, gt=0, description="Main-stream radius in normalized units")
    lambda1: float = Field(default=300.0, gt=0)
    lambda2: float = Field(default=600.0, gt=0)
    trials: int = Field(default=16, ge=1, description="Random subsets scored per stream")
    bins: int = Field(default=20, ge=1, description="Histogram cells per axis")
    seed: int = 0

    @model_validator(mode='after')
    def validate_lambdas(self):
        if not self.lambda1 < self.lambda2:
            raise ValueError("lambda1 must be smaller than lambda2")
        return self


class NeuronParams(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    delta_curr: float = Field(default=0.75, gt=0, le=1)
    delta_volt: float = Field(default=0.96875, gt=0, le=1)
    u_th: float = Field(default=0.8, gt=0)


class LayerSpec(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: LayerKind
    in_channels: int = Field(..., ge=1)
    out_channels: int = Field(..., ge=1)
    kernel_size: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)
    stride: int = Field(default=1, ge=1)
    fixed: bool = False

    @model_validator(mode='after')
    def validate_kind(self):
        if self.kind == LayerKind.AVG_POOL:
            if self.in_channels != self.out_channels:
                raise ValueError("Pooling keeps the channel count")
            if self.stride not in (1, self.kernel_size):
                raise ValueError("Pooling stride equals its kernel size")
            if not self.fixed:
                raise ValueError("Pooling layers carry fixed weights")
        elif self.kind == LayerKind.CONV:
            if self.stride != 1:
                raise ValueError("Only stride-1 convolutions are supported")
            if self.padding > self.kernel_size - 1:
                raise ValueError("Padding must be smaller than the kernel size")
        return self

    @property
    def trainable(self) -> bool:
        return not self.fixed


class LossSpec(BaseModel):
    model_config = ConfigDict(extra='forbid')

    n_dt: int = Field(..., description="Desired spikes on the true channel")
    n_df: int = Field(..., description="Desired spikes on the other channels")
    T: int = Field(..., ge=1)
    M: int = Field(default=2, ge=2)

    @model_validator(mode='after')
    def validate_counts(self):
        if not 0 < self.n_df < self.n_dt < self.T:
            raise ValueError("Expected 0 < n_df < n_dt < T")
        return self


class SurrogateSpec(BaseModel):
    model_config = ConfigDict(extra='forbid')

    tau_n: float = Field(default=1.0, gt=0)
    tau_d: float = Field(default=1.25, gt=0)
    u_th: Optional[float] = Field(default=None, gt=0, description="Overrides each layer's threshold")


class TrainConfig(BaseModel):
    """Training run settings; loaded from the key-value config file"""
    model_config = ConfigDict(extra='forbid')

    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=16, ge=1)
    lr: float = Field(default=0.001, gt=0)
    T: int = Field(default=50, ge=1, description="Time steps; equals the window in ms")
    n_dt: Optional[int] = None
    n_df: Optional[int] = None
    optimizer: Optimizer = Optimizer.ADAM
    seed: int = 0
    kep: bool = False
    kep_config: KepConfig = Field(default_factory=KepConfig)
    calibration_samples: int = Field(default=16, ge=0,
                                     description="Training scenes used to balance layer gains; 0 keeps the init")
    train_size: int = Field(default=800, ge=1, description="Scenes generated when no dataset is given")
    dataset: List[str] = Field(default_factory=list, description="Directories holding a manifest.csv")

    @model_validator(mode='after')
    def validate_loss_pair(self):
        if (self.n_dt is None) != (self.n_df is None):
            raise ValueError("n_dt and n_df are given together")
        return self


class LightingProfile(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    noise_multiplier: float = Field(..., ge=0)
    contrast_multiplier: float = Field(..., gt=0)


LIGHTING_PROFILES: Dict[Lighting, LightingProfile] = {
    Lighting.INDOOR_NORMAL: LightingProfile(noise_multiplier=1.0, contrast_multiplier=1.0),
    Lighting.INDOOR_LOW: LightingProfile(noise_multiplier=8.0, contrast_multiplier=0.6),
    Lighting.OUTDOOR_NORMAL: LightingProfile(noise_multiplier=1.0, contrast_multiplier=1.2),
    Lighting.OUTDOOR_LOW: LightingProfile(noise_multiplier=6.0, contrast_multiplier=0.7),
}


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    train_objects: List[ObjectKind] = Field(default_factory=lambda: [ObjectKind.DISK])
    test_objects: List[ObjectKind] = Field(default_factory=lambda: [ObjectKind.DISK, ObjectKind.TALL_BLOB])
    lightings: List[Lighting] = Field(default_factory=lambda: list(Lighting))
    windows: List[int] = Field(default_factory=lambda: [30, 50, 100])
    speed_range: Tuple[float, float] = Field(default=(0.4, 1.2), description="Object speed in px/ms")
    radius_range: Tuple[float, float] = Field(default=(4.0, 7.0))
    direction_balance: float = Field(default=0.5, gt=0, lt=1)
    base_noise_rate: float = Field(default=0.025, ge=0, description="events/pixel/s at normal light")
    contrast: float = Field(default=0.35, gt=0)
    threshold: float = Field(default=0.2, gt=0)
    mixed_polarity: bool = Field(default=False, description="Randomize bright/dark objects")
    train_size: int = Field(default=800, ge=1)
    test_size: int = Field(default=800, ge=1)
    kep: bool = False
    quantized: bool = False
    modes: List[EvalMode] = Field(default_factory=lambda: [EvalMode.ASYNC])
    width: int = Field(default=128, ge=8)
    height: int = Field(default=128, ge=8)
    seed: int = 0

    @field_validator('windows')
    @classmethod
    def validate_windows(cls, v):
        if not v or any(w <= 0 for w in v):
            raise ValueError("Windows must be positive")
        return v

    @field_validator('speed_range', 'radius_range')
    @classmethod
    def validate_range(cls, v):
        lo, hi = v
        if lo <= 0 or hi < lo:
            raise ValueError("Expected 0 < low <= high")
        return v


class DodgeAction(BaseModel):
    model_config = ConfigDict(extra='forbid')

    direction: int = Field(..., ge=0, description="Approach channel with the most spikes")
    speed: float = Field(..., ge=0, description="Dodge speed alpha * N_r / N_DT")
    counts: List[int] = Field(default_factory=list)

    @property
    def dodge_direction(self) -> int:
        """Opposite of the approach: channel 0 (from-left) dodges right (1)"""
        if len(self.counts) == 2:
            return 1 - self.direction
        return self.direction


class EvalRow(BaseModel):
    model_config = ConfigDict(extra='forbid')

    object: ObjectKind
    lighting: Lighting
    window_ms: int
    mode: EvalMode
    kep: bool = False
    quantized: bool = False
    n: int = Field(..., ge=0)
    success_rate: float = Field(..., ge=0, le=1)
    mean_counts: List[float]
    mean_synaptic_events: float
    mean_raw_events: float
    mean_main_events: float
    mean_key_events: float
    ms_per_inference: Optional[float] = None
    peak_memory_mb: Optional[float] = None

    @model_validator(mode='after')
    def validate_kep_sizes(self):
        if not self.mean_key_events <= self.mean_main_events <= self.mean_raw_events:
            raise ValueError("KEP sizes must satisfy key <= main <= raw")
        return self


class EvalReport(BaseModel):
    model_config = ConfigDict(extra='forbid')

    checkpoint: str = ""
    rows: List[EvalRow] = Field(default_factory=list)
    config: Dict[str, Any] = Field(default_factory=dict)


class InferRequest(BaseModel):
    """Either raw events or a framed address sequence"""
    model_config = ConfigDict(
        extra='forbid',
        json_schema_extra={
            "examples": [
                {
                    "events": [[10, 40, 64, 1], [1200, 41, 64, 1]],
                    "width": 128,
                    "height": 128,
                    "window_ms": 50
                }
            ]
        }
    )

    events: Optional[List[Tuple[int, int, int, int]]] = Field(default=None, description="(t_us, x, y, p) tuples")
    frames: Optional[List[Tuple[int, List[int]]]] = Field(default=None, description="(step, addresses) pairs")
    width: int = Field(default=128, ge=1)
    height: int = Field(default=128, ge=1)
    window_ms: float = Field(default=50.0, gt=0)
    kep: bool = False

    @model_validator(mode='after')
    def validate_payload(self):
        if (self.events is None) == (self.frames is None):
            raise ValueError("Provide exactly one of events or frames")
        return self


class InferResponse(BaseModel):
    model_config = ConfigDict(extra='forbid')

    counts: List[int]
    action: DodgeAction
    synaptic_events: int
    input_events: int
    execution_time: float = Field(..., description="Inference time in seconds")
