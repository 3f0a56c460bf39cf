from phenofactor.cli import main

main()
