import sys

from abmlens.app import main

sys.exit(main())
