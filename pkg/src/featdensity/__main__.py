from featdensity.cli import main

main()
