import numpy as np

from cli_io.management.base import GFDNCommand
from cli_io.services import DatasetService
from common_slopes.models import GridSpec
from common_slopes.services import CommonSlopesService
from filterbank.services import FilterBankService


class Command(GFDNCommand):
    help = 'Synthesize a grid dataset from a coupled-room decay model and save it with its ground truth'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--room', help='JSON or TOML room file (t60_table, near_amplitudes, far_amplitudes, ...)')
        parser.add_argument('--grid', type=int, nargs=2, default=(8, 8), metavar=('NX', 'NY'))
        parser.add_argument('--x-range', type=float, nargs=2, default=(0.0, 1.0), metavar=('LO', 'HI'))
        parser.add_argument('--y-range', type=float, nargs=2, default=(0.0, 1.0), metavar=('LO', 'HI'))
        parser.add_argument('--height', type=float, default=1.5)
        parser.add_argument('--output', help='Dataset directory')

    def run(self, **options):
        config = self.load_config(options)
        room = DatasetService.load_room(options['room'], config) if options['room'] else DatasetService.default_room(config)
        grid = GridSpec(tuple(options['x_range']), tuple(options['y_range']), *options['grid'], height=options['height'])
        bank = FilterBankService.design_bank(config.sample_rate, config.num_bands, config.fir_order,
                                             config.band_base_hz)

        dataset = CommonSlopesService.make_synthetic_dataset(
            room, grid, np.random.default_rng(config.seed), bank, self.workers(options)
        )
        dataset = DatasetService.make_split(dataset, config.split_fraction, config.seed)

        directory = self.output_dir(options, 'dataset')
        config.write(directory / 'config.json')
        manifest = DatasetService.save_dataset(dataset, directory, config.config_hash())
        self.stdout.write(f'{dataset} written to {manifest}')
