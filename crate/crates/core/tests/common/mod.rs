pub mod gradient_suite;
