"""
Time-domain rendering of grouped feedback delay networks.
"""
import logging
import threading
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError

from .services import GFDNService

logger = logging.getLogger(__name__)

DENORMAL_FLOOR = 1e-30


@dataclass
class ProcessorState:
    """Circular delay-line buffers and their read/write pointers"""

    buffers: list
    pointers: np.ndarray

    @classmethod
    def for_topology(cls, topology):
        return cls(
            buffers=[np.zeros(int(m)) for m in topology.delay_lengths],
            pointers=np.zeros(topology.total_delays, dtype=np.int64),
        )

    @property
    def delay_lengths(self):
        return np.array([buffer.size for buffer in self.buffers], dtype=np.int64)

    def clear(self):
        for buffer in self.buffers:
            buffer.fill(0.0)
        self.pointers.fill(0)


class GFDNProcessor:
    """
    Single-threaded block processor for one network.

    Position gains are published by a control thread as a complete snapshot
    and adopted at the start of the next block.
    """

    def __init__(self, params):
        self._params = params
        self._pending = None
        self._lock = threading.Lock()
        self.state = ProcessorState.for_topology(params.topology)

    @property
    def params(self):
        return self._params

    def reset(self):
        self.state.clear()

    def publish_position_gains(self, g_i, g_o):
        snapshot = GFDNService.update_position_gains(self._params, g_i, g_o)
        with self._lock:
            self._pending = snapshot

    def _adopt_pending(self):
        with self._lock:
            pending, self._pending = self._pending, None
        if pending is not None:
            self._params = pending

    def adopt(self, params):
        """Install a snapshot immediately; called from the processing thread only"""
        if not np.array_equal(params.topology.delay_lengths, self._params.topology.delay_lengths):
            raise ValidationError('Snapshot does not match the processor delay lengths')
        with self._lock:
            self._pending = None
        self._params = params

    def process(self, x):
        self._adopt_pending()
        return self.process_block(self.state, x, self._params)

    def impulse_response(self, length):
        self.reset()
        x = np.zeros(length)
        x[0] = 1.0
        return self.process(x)

    @staticmethod
    def process_block(state, x, params):
        """
        Run the recursion over one block of input samples.

        Per sample: read delay outputs, attenuate by gamma ** m, mix with the
        feedback matrix, write mix plus injected input, tap the attenuated
        outputs. Sub-blocks no longer than the shortest delay are processed as
        matrix operations since none of their writes is read back inside them.
        """
        if state is None or not np.array_equal(state.delay_lengths, params.topology.delay_lengths):
            raise ValidationError('Processor state is not sized to the network delay lengths')
        x = np.asarray(x, dtype=float).ravel()
        if not np.all(np.isfinite(x)):
            raise ValidationError('Input block contains non-finite samples')

        delays = params.topology.delay_lengths
        attenuation = params.delay_attenuation[:, None]
        feedback = params.feedback.matrix
        b = params.effective_input_gains[:, None]
        c = params.effective_output_gains
        d = params.direct_gain
        chunk = int(delays.min())

        y = np.empty_like(x)
        outputs = np.empty((delays.size, chunk))
        for start in range(0, x.size, chunk):
            segment = x[start:start + chunk]
            length = segment.size
            indices = [(state.pointers[i] + np.arange(length)) % delays[i] for i in range(delays.size)]

            s = outputs[:, :length]
            for i, idx in enumerate(indices):
                s[i] = state.buffers[i][idx]
            s *= attenuation

            y[start:start + length] = c @ s + d * segment
            v = feedback @ s + b * segment[None, :]
            v[np.abs(v) < DENORMAL_FLOOR] = 0.0

            for i, idx in enumerate(indices):
                state.buffers[i][idx] = v[i]
            state.pointers = (state.pointers + length) % delays

        return y


class SubbandRenderer:
    """
    Filter-bank split, one processor per band, recombination.

    Position gains for the whole bank form one snapshot: ``render`` adopts it
    for every band before any band processes, so a block never mixes bands
    from two different publishes.
    """

    def __init__(self, network_bank, octave_bank):
        if network_bank.num_bands != octave_bank.num_bands:
            raise ValidationError(
                f'{network_bank.num_bands} band networks but {octave_bank.num_bands} filter-bank bands'
            )
        self.network_bank = network_bank
        self.octave_bank = octave_bank
        self.processors = [GFDNProcessor(params) for params in network_bank.networks]
        self._pending = None
        self._lock = threading.Lock()

    def publish_position_gains(self, source_gains, receiver_gains):
        """Per-band gain snapshots, arrays of shape (B, G)"""
        if len(source_gains) != len(self.processors) or len(receiver_gains) != len(self.processors):
            raise ValidationError(
                f'Expected gains for {len(self.processors)} bands, got {len(source_gains)} and {len(receiver_gains)}'
            )
        snapshot = tuple(
            GFDNService.update_position_gains(processor.params, g_i, g_o)
            for processor, g_i, g_o in zip(self.processors, source_gains, receiver_gains)
        )
        with self._lock:
            self._pending = snapshot

    def _adopt_pending(self):
        with self._lock:
            pending, self._pending = self._pending, None
        if pending is not None:
            for processor, params in zip(self.processors, pending):
                processor.adopt(params)

    def reset(self):
        for processor in self.processors:
            processor.reset()

    def render(self, x):
        from filterbank.services import FilterBankService

        self._adopt_pending()
        bands = FilterBankService.split(x, self.octave_bank)
        outputs = np.stack([processor.process(band) for processor, band in zip(self.processors, bands)])
        return FilterBankService.recombine(outputs)

    def impulse_response(self, length, align=True):
        """
        Impulse response of the whole bank. With ``align`` the common filter
        group delay is removed so the result starts at the network onset.
        """
        self.reset()
        x = np.zeros(length)
        x[0] = 1.0
        h = self.render(x)
        if align:
            delay = self.octave_bank.group_delay
            h = h[delay:delay + length]
        logger.debug(f"Rendered {length}-sample impulse response through {len(self.processors)} bands")
        return h
