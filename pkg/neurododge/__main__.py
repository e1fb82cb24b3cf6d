import sys

from neurododge.cli import main

sys.exit(main())
