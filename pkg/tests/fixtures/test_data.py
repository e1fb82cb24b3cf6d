"""Test data fixtures for NeuroDodge tests"""

TINY_T = 20
TINY_INPUT_SHAPE = (2, 16, 16)

# (input, C, U, spike) for consecutive steps from rest with the default neuron
LIF_HAND_STEPS = [
    (1.0, 1.0, 1.0, 1),
    (0.0, 0.75, 0.75, 0),
    (0.0, 0.5625, 0.96875 * 0.75 + 0.5625, 1),
]

# counts, true channel, (n_dt, n_df, T), expected loss
LOSS_CASES = [
    ((70, 10), 0, (70, 10, 100), 0.0),
    ((60, 20), 0, (70, 10, 100), 0.01),
    ((0, 0), 0, (70, 10, 100), 0.25),
]

WINDOW_LOSS_PAIRS = {30: (25, 5), 50: (30, 10), 100: (70, 10)}

# (x, y, p), l_H, expected address
ADDRESS_CASES = [
    ((0, 0, 0), 128, 0),
    ((1, 2, 1), 128, 261),
    ((127, 127, 1), 128, 32767),
]

# raw weight, sigma, quantized
QUANTIZE_CASES = [
    (0.0, 2.0, 0.0),
    (3.7, 2.0, 4.0),
    (1.0, 2.0, 2.0),
    (-1.0, 2.0, -2.0),
    (0.99, 2.0, 0.0),
    (-3.0, 2.0, -4.0),
    (300.0, 2.0, 254.0),
    (-300.0, 2.0, -256.0),
]

# counts, n_dt, approach channel, speed
DECODE_ACTION_CASES = [
    ((70, 10), 70, 0, 2.0),
    ((10, 35), 70, 1, 1.0),
    ((0, 0), 70, 0, 0.0),
    ((12, 12), 30, 0, 0.8),
]

KEY_COUNT_CASES = {
    0: 0,
    1: 1,
    499: 499,
    500: 300,
    800: 300,
    999: 300,
    1000: 600,
    1765: 600,
    5000: 600,
}

TRAIN_CONFIG_TEXT = """
# smoke run
epochs = 2
batch_size = 4
calibration_samples = 4
lr = 0.002
T = 30
n_dt = 25
n_df = 5
optimizer = sgd
seed = 11
dataset = data/a, data/b
"""

ERROR_EXIT_CODES = {
    "ConfigError": 1,
    "EventDataError": 2,
    "FormatError": 2,
    "ShapeError": 2,
    "TrainingModeError": 2,
    "NumericError": 3,
}
