import sys

from gcdm.cli import main

sys.exit(main())
