import numpy as np
from django.core.exceptions import ValidationError

from autodiff_train.services import TrainingService
from cli_io.management.base import GFDNCommand
from cli_io.services import CheckpointService, EvaluationService
from freq_domain.services import RIRExportService
from gfdn_core.processor import SubbandRenderer


class Command(GFDNCommand):
    help = 'Render the impulse response of a trained model at any receiver position'

    uses_config = False

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--position', type=float, nargs=3, required=True, metavar=('X', 'Y', 'Z'))
        parser.add_argument('--length', type=float, help='Seconds to render (default: the training length)')
        parser.add_argument('--initial', action='store_true', help='Render the untrained initialization')
        parser.add_argument('--csv', help='Also write the samples as CSV')
        parser.add_argument('--output', required=True, help='Output WAV path')

    def run(self, **options):
        result, config_hash, _ = CheckpointService.load(options['checkpoint'])
        position = np.array(options['position'])
        if not np.all(np.isfinite(position)):
            raise ValidationError(f'Position must be finite, got {position.tolist()}')
        length = result.num_points
        if options['length'] is not None:
            if options['length'] <= 0:
                raise ValidationError(f'Length must be positive, got {options["length"]} s')
            length = int(round(options['length'] * result.sample_rate))

        gains = [TrainingService.position_gains(result, b, position, options['initial'])
                 for b in range(len(result.bands))]
        renderer = SubbandRenderer(result.network_bank(options['initial']), EvaluationService.analysis_bank(result))
        renderer.publish_position_gains([g_i for g_i, _ in gains], [g_o for _, g_o in gains])
        h = renderer.impulse_response(length)
        if not np.all(np.isfinite(h)):
            raise ArithmeticError('The rendered impulse response is not finite')

        path = RIRExportService.write_wav(options['output'], h, result.sample_rate, config_hash)
        if options['csv']:
            RIRExportService.write_csv(options['csv'], h, config_hash)
        self.stdout.write(f'Rendered {length} samples at {position.tolist()} to {path}')
