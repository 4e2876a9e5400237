import sys

from clhpo.cli import main

sys.exit(main())
