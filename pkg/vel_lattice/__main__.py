import sys

from .Lattice_CLI import main

sys.exit(main())
